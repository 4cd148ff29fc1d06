"""
Dense reconstruction: sparse depth priors, TSDF fusion, surface extraction
and outlier filtering of the extracted geometry.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from skimage import measure
from sklearn.neighbors import NearestNeighbors

from config import (
    VOXEL_SIZE, TRUNCATION_MULTIPLIER, MAX_WEIGHT, FRAME_WEIGHT, MAX_DEPTH,
    RADIUS_FILTER, STATISTICAL_FILTER
)
from exceptions import ReconstructionError, GeometryError
from geometry import DepthMap, Intrinsics, Pose, project_points, unproject_depth

logger = logging.getLogger(__name__)

# voxels per integration batch
INTEGRATION_CHUNK = 1 << 20
DEGENERATE_AREA = 1e-12


@dataclass
class SparseCloud:
    """Sparse reconstruction points with their observation counts."""
    points: np.ndarray
    observations: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ReconstructionError("Sparse cloud contains non-finite coordinates")
        if self.observations is None:
            self.observations = np.ones(len(self.points), dtype=np.int64)
        self.observations = np.asarray(self.observations, dtype=np.int64)
        if len(self.observations) != len(self.points) or np.any(self.observations < 1):
            raise ReconstructionError("Every sparse point needs an observation count >= 1")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    """Vertices in meters and triangles as vertex-index triples."""
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ReconstructionError("Triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0)
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def keep_vertices(self, kept: np.ndarray) -> "TriangleMesh":
        """Restrict to the given vertex indices, dropping triangles that lose a corner."""
        keep_mask = np.zeros(len(self.vertices), dtype=bool)
        keep_mask[np.asarray(kept, dtype=np.int64)] = True
        triangles = self.triangles[np.all(keep_mask[self.triangles], axis=1)] if len(self.triangles) else self.triangles
        return _compact(self.vertices, triangles, keep_mask)


def _compact(vertices: np.ndarray, triangles: np.ndarray,
             keep_mask: Optional[np.ndarray] = None) -> TriangleMesh:
    """Drop unreferenced (or unkept) vertices and reindex triangles."""
    used = np.zeros(len(vertices), dtype=bool)
    if len(triangles):
        used[triangles.ravel()] = True
    if keep_mask is not None:
        used &= keep_mask
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    return TriangleMesh(vertices=vertices[used], triangles=remap[triangles] if len(triangles) else triangles)


@dataclass
class TsdfVolume:
    """
    Truncated signed distance grid.

    `distances` are normalized by the truncation distance and lie in [-1, 1];
    untouched voxels keep distance 1 and weight 0. Index (i, j, l) maps to
    the world point origin + (i, j, l) * voxel_size.
    """
    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    truncation: float
    max_weight: float = MAX_WEIGHT
    distances: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0:
            raise ReconstructionError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise ReconstructionError("Truncation distance must be at least one voxel")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ReconstructionError(f"Invalid volume dimensions {self.dims}")
        if self.distances is None:
            self.distances = np.ones(self.dims, dtype=np.float32)
        if self.weights is None:
            self.weights = np.zeros(self.dims, dtype=np.float32)
        if self.distances.shape != self.dims or self.weights.shape != self.dims:
            raise ReconstructionError("Distance and weight grids must match the volume dimensions")

    @classmethod
    def create(cls, bounds_min: Sequence[float], bounds_max: Sequence[float],
               voxel_size: float = VOXEL_SIZE,
               truncation_multiplier: float = TRUNCATION_MULTIPLIER,
               max_weight: float = MAX_WEIGHT) -> "TsdfVolume":
        """Allocate a volume covering the given world bounds."""
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        if np.any(hi <= lo):
            raise ReconstructionError("Volume bounds are empty")
        dims = tuple(int(n) for n in np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1)
        logger.debug(f"Allocating TSDF volume {dims} at voxel {voxel_size}")
        return cls(origin=lo, voxel_size=voxel_size, dims=dims,
                   truncation=truncation_multiplier * voxel_size, max_weight=max_weight)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_centers(self, flat_indices: np.ndarray) -> np.ndarray:
        ijk = np.column_stack(np.unravel_index(flat_indices, self.dims))
        return self.origin + ijk * self.voxel_size

    def observed_cells(self) -> np.ndarray:
        """Cells (dims - 1) whose 8 corners all carry weight."""
        seen = self.weights > 0
        cells = np.ones(tuple(d - 1 for d in self.dims), dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    cells &= seen[di:seen.shape[0] - 1 + di, dj:seen.shape[1] - 1 + dj, dk:seen.shape[2] - 1 + dk]
        return cells


def sparse_depth_prior(cloud: SparseCloud, pose: Pose, k: Intrinsics) -> DepthMap:
    """Z-buffered depth of sparse points; pixels without a point are invalid."""
    values = np.full((k.height, k.width), np.inf)
    if len(cloud):
        cols, rows, z, inside = project_points(cloud.points, pose, k)
        np.minimum.at(values, (rows[inside], cols[inside]), z[inside])
    validity = np.isfinite(values)
    return DepthMap(values=np.where(validity, values, 0.0), validity=validity)


def truncate_depth(depth: DepthMap, max_depth: float = MAX_DEPTH) -> DepthMap:
    """Invalidate depths beyond max_depth."""
    if max_depth <= 0:
        raise ReconstructionError("max_depth must be positive")
    return DepthMap(values=depth.values, validity=depth.validity & (depth.values <= max_depth))


def integrate_frame(volume: TsdfVolume, depth: DepthMap, pose: Pose, k: Intrinsics,
                    weight: float = FRAME_WEIGHT) -> TsdfVolume:
    """
    Fuse one depth map into the volume in place.

    Every voxel whose centre projects onto a valid depth pixel with
    sdf = depth - voxel_depth > -truncation takes a weighted running
    average of clamp(sdf / truncation, -1, 1). Voxels behind the band are
    left untouched.

    Args:
        volume: Volume to update
        depth: Metric depth map of the frame
        pose: Camera-to-world pose of the frame
        k: Intrinsics matching the depth map size

    Returns:
        The updated volume

    Raises:
        ReconstructionError: If the depth map does not match the intrinsics
    """
    if depth.width != k.width or depth.height != k.height:
        raise ReconstructionError(
            f"Depth map {depth.width}x{depth.height} does not match intrinsics {k.width}x{k.height}"
        )
    if depth.valid_count == 0:
        return volume

    tau = volume.truncation
    flat_d = volume.distances.reshape(-1)
    flat_w = volume.weights.reshape(-1)
    updated = 0
    for start in range(0, volume.num_voxels, INTEGRATION_CHUNK):
        index = np.arange(start, min(start + INTEGRATION_CHUNK, volume.num_voxels))
        cols, rows, z, inside = project_points(volume.voxel_centers(index), pose, k)
        if not inside.any():
            continue
        index, cols, rows, z = index[inside], cols[inside], rows[inside], z[inside]
        valid = depth.validity[rows, cols]
        sdf = depth.values[rows, cols] - z
        band = valid & (sdf > -tau)
        if not band.any():
            continue
        index = index[band]
        tsdf = np.clip(sdf[band] / tau, -1.0, 1.0)
        w_old = flat_w[index].astype(np.float64)
        flat_d[index] = (w_old * flat_d[index] + weight * tsdf) / (w_old + weight)
        flat_w[index] = np.minimum(w_old + weight, volume.max_weight)
        updated += len(index)

    logger.debug(f"Frame {pose.frame_id}: updated {updated} voxels")
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """
    Marching-cubes surface at the zero level over fully observed cells.

    Returns an empty mesh when the observed field has no zero crossing.
    """
    if min(volume.dims) < 2:
        return TriangleMesh()
    observed = volume.weights > 0
    if not observed.any():
        return TriangleMesh()
    seen = volume.distances[observed]
    if seen.min() >= 0.0 or seen.max() <= 0.0:
        return TriangleMesh()

    try:
        verts, faces, _, _ = measure.marching_cubes(volume.distances.astype(np.float64), level=0.0)
    except (ValueError, RuntimeError) as e:
        logger.warning(f"Surface extraction found no surface: {e}")
        return TriangleMesh()
    if len(faces) == 0:
        return TriangleMesh()

    verts = verts.astype(np.float64)
    faces = faces.astype(np.int64)
    cells = volume.observed_cells()
    centroid = verts[faces].mean(axis=1)
    cell_index = np.clip(np.floor(centroid).astype(np.int64), 0, np.array(cells.shape) - 1)
    faces = faces[cells[cell_index[:, 0], cell_index[:, 1], cell_index[:, 2]]]

    world = volume.origin + verts * volume.voxel_size
    mesh = TriangleMesh(vertices=world, triangles=faces)
    faces = faces[mesh.triangle_areas() > DEGENERATE_AREA]
    mesh = _compact(world, faces)
    logger.info(f"Extracted mesh with {len(mesh.vertices)} vertices and {len(mesh.triangles)} triangles")
    return mesh


def radius_filter(points: np.ndarray, radius: float = RADIUS_FILTER["radius"],
                  min_neighbors: int = RADIUS_FILTER["min_neighbors"]) -> np.ndarray:
    """Indices of points with at least min_neighbors other points within radius."""
    if radius <= 0:
        raise ReconstructionError("radius must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if min_neighbors <= 0 or len(points) == 0:
        return np.arange(len(points))
    nn = NearestNeighbors(radius=radius).fit(points)
    neighborhoods = nn.radius_neighbors(points, return_distance=False)
    counts = np.array([len(n) - 1 for n in neighborhoods])
    return np.nonzero(counts >= min_neighbors)[0]


def statistical_filter(points: np.ndarray, k: int = STATISTICAL_FILTER["k"],
                       std_ratio: float = STATISTICAL_FILTER["std_ratio"]) -> np.ndarray:
    """
    Indices of points whose mean k-nearest-neighbor distance is at most
    mean + std_ratio * std over all points.

    Raises:
        ReconstructionError: If k < 1 or there are not more than k points
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ReconstructionError("k must be at least 1")
    if len(points) <= k:
        raise ReconstructionError(f"Statistical filter needs more than {k} points, got {len(points)}")
    distances, _ = NearestNeighbors(n_neighbors=k + 1).fit(points).kneighbors(points)
    mean_distance = distances[:, 1:].mean(axis=1)
    limit = mean_distance.mean() + std_ratio * mean_distance.std()
    return np.nonzero(mean_distance <= limit + 1e-9)[0]


def clean_mesh(mesh: TriangleMesh, radius: float = RADIUS_FILTER["radius"],
               min_neighbors: int = RADIUS_FILTER["min_neighbors"],
               k: int = STATISTICAL_FILTER["k"],
               std_ratio: float = STATISTICAL_FILTER["std_ratio"]) -> TriangleMesh:
    """Run both filters on the mesh vertices and drop triangles touching removed vertices."""
    if len(mesh.vertices) == 0:
        return mesh
    kept = radius_filter(mesh.vertices, radius, min_neighbors)
    cleaned = mesh.keep_vertices(kept)
    if len(cleaned.vertices) > k:
        cleaned = cleaned.keep_vertices(statistical_filter(cleaned.vertices, k, std_ratio))
    else:
        logger.warning(f"Skipping statistical filter: only {len(cleaned.vertices)} vertices remain")
    logger.info(f"Mesh cleaning kept {len(cleaned.vertices)} of {len(mesh.vertices)} vertices")
    return cleaned


def bounds_from_depths(frames: Iterable[Tuple[DepthMap, Pose, Intrinsics]],
                       margin: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """World bounds of all valid unprojected depth pixels, padded by margin."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for depth, pose, k in frames:
        if depth.valid_count == 0:
            continue
        try:
            points = unproject_depth(depth, pose, k)
        except GeometryError as e:
            raise ReconstructionError(f"Frame {pose.frame_id}: {e.message}")
        lo = np.minimum(lo, points.min(axis=0))
        hi = np.maximum(hi, points.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ReconstructionError("No valid depth to bound the scene")
    return lo - margin, hi + margin


def fuse_depth_frames(frames: Sequence[Tuple[DepthMap, Pose, Intrinsics]],
                      voxel_size: float = VOXEL_SIZE,
                      truncation_multiplier: float = TRUNCATION_MULTIPLIER,
                      max_weight: float = MAX_WEIGHT,
                      max_depth: float = MAX_DEPTH) -> TsdfVolume:
    """Truncate and integrate a sequence of frames into a volume sized to fit them."""
    truncated = [(truncate_depth(depth, max_depth), pose, k) for depth, pose, k in frames]
    margin = truncation_multiplier * voxel_size
    lo, hi = bounds_from_depths(truncated, margin=margin)
    volume = TsdfVolume.create(lo, hi, voxel_size, truncation_multiplier, max_weight)
    for depth, pose, k in truncated:
        integrate_frame(volume, depth, pose, k)
    logger.info(f"Fused {len(truncated)} frames into a {volume.dims} volume")
    return volume

