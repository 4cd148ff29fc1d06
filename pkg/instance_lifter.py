"""
Instance lifting: turn per-frame 2D instance masks into 3D object instances
by neighboring-frame view consensus followed by a spatial-agreement merge.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from config import (
    MIN_MASK_PIXELS, NEIGHBOR_WINDOW, MERGE_THRESHOLD, IOU_THRESHOLD,
    MIN_INSTANCE_POINTS, MIN_DEPTH_TOLERANCE, VOXEL_SIZE
)
from exceptions import InstanceLiftError
from geometry import Aabb, DepthMap, Intrinsics, Pose, project_points, unproject_depth

logger = logging.getLogger(__name__)


def depth_tolerance(voxel_size: float = VOXEL_SIZE) -> float:
    """Depth agreement tolerance used by view consensus."""
    return max(3.0 * voxel_size, MIN_DEPTH_TOLERANCE)


@dataclass
class FrameMaskSet:
    """Label image of one frame (0 = background) with optional categories per label."""
    frame_id: int
    labels: np.ndarray
    categories: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise InstanceLiftError(f"Frame {self.frame_id}: label image must be 2D")


@dataclass
class FrameObservation:
    """Depth, pose and masks of one frame."""
    frame_id: int
    depth: DepthMap
    pose: Pose
    masks: FrameMaskSet


@dataclass
class MaskNode:
    """A 2D mask lifted to world points through its valid depth pixels."""
    frame_id: int
    mask_label: int
    points: np.ndarray
    region: np.ndarray
    category: Optional[str] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0 or not np.all(np.isfinite(self.points)):
            raise InstanceLiftError(f"Mask {self.frame_id}:{self.mask_label} has no finite points")
        # flat pixel indices of every pixel carrying the label
        self.region = np.unique(np.asarray(self.region, dtype=np.int64))

    @property
    def key(self) -> Tuple[int, int]:
        return self.frame_id, self.mask_label


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Unique integer voxel coordinates of a point set."""
    if len(points) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return np.unique(np.floor(np.asarray(points) / voxel_size).astype(np.int64), axis=0)


def _dedupe_points(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Keep the first point falling into each voxel, preserving input order."""
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def _majority(votes: Mapping[str, int]) -> Optional[str]:
    if not votes:
        return None
    best = max(votes.values())
    return min(category for category, count in votes.items() if count == best)


@dataclass
class Instance3D:
    """A 3D object instance merged from one or more masks."""
    instance_id: int
    points: np.ndarray
    members: List[Tuple[int, int]]
    category_votes: Dict[str, int] = field(default_factory=dict)
    category: Optional[str] = None
    aabb: Aabb = field(init=False)
    centroid: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise InstanceLiftError(f"Instance {self.instance_id} has no points")
        self.members = sorted((int(f), int(l)) for f, l in self.members)
        if self.category is None:
            self.category = _majority(self.category_votes)
        self.aabb = Aabb.from_points(self.points)
        self.centroid = self.points.mean(axis=0)

    @property
    def point_count(self) -> int:
        return len(self.points)

    @classmethod
    def from_nodes(cls, instance_id: int, nodes: Sequence[MaskNode],
                   voxel_size: float = VOXEL_SIZE) -> "Instance3D":
        ordered = sorted(nodes, key=lambda n: n.key)
        points = _dedupe_points(np.vstack([n.points for n in ordered]), voxel_size)
        votes = Counter(n.category for n in ordered if n.category is not None)
        return cls(instance_id=instance_id, points=points, members=[n.key for n in ordered],
                   category_votes=dict(votes))

    def merged_with(self, other: "Instance3D", voxel_size: float = VOXEL_SIZE) -> "Instance3D":
        first, second = (self, other) if self.instance_id <= other.instance_id else (other, self)
        points = _dedupe_points(np.vstack([first.points, second.points]), voxel_size)
        votes = Counter(first.category_votes)
        votes.update(second.category_votes)
        return Instance3D(instance_id=first.instance_id, points=points,
                          members=first.members + second.members, category_votes=dict(votes))

    def with_id(self, instance_id: int) -> "Instance3D":
        return Instance3D(instance_id=instance_id, points=self.points, members=self.members,
                          category_votes=self.category_votes, category=self.category)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.instance_id,
            "category": self.category,
            "centroid": self.centroid.tolist(),
            "aabb": self.aabb.to_dict(),
            "point_count": self.point_count,
            "members": [list(m) for m in self.members],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], points: np.ndarray) -> "Instance3D":
        return cls(instance_id=int(data["id"]), points=points,
                   members=[tuple(m) for m in data.get("members", [])],
                   category=data.get("category"))


def lift_masks(masks: FrameMaskSet, depth: DepthMap, pose: Pose, k: Intrinsics,
               min_pixels: int = MIN_MASK_PIXELS) -> List[MaskNode]:
    """
    Lift every label of a frame with enough valid-depth pixels to a MaskNode.

    Raises:
        InstanceLiftError: If the label image, depth map and intrinsics disagree in size
    """
    if masks.labels.shape != depth.values.shape or masks.labels.shape != (k.height, k.width):
        raise InstanceLiftError(
            f"Frame {masks.frame_id}: mask {masks.labels.shape[::-1]} and depth "
            f"{depth.values.shape[::-1]} do not match intrinsics {k.width}x{k.height}"
        )

    nodes = []
    for label in np.unique(masks.labels):
        if label == 0:
            continue
        region = masks.labels == label
        selected = region & depth.validity
        if int(selected.sum()) < min_pixels:
            logger.debug(f"Frame {masks.frame_id}: label {label} has too few valid pixels")
            continue
        nodes.append(MaskNode(
            frame_id=masks.frame_id,
            mask_label=int(label),
            points=unproject_depth(depth, pose, k, mask=selected),
            region=np.flatnonzero(region),
            category=masks.categories.get(int(label)),
        ))
    return nodes


def _agreement(source: MaskNode, target: MaskNode, depth: DepthMap, pose: Pose,
               k: Intrinsics, tolerance: float) -> float:
    cols, rows, z, inside = project_points(source.points, pose, k)
    if not inside.any():
        return 0.0
    cols, rows, z = cols[inside], rows[inside], z[inside]
    in_mask = np.isin(rows * k.width + cols, target.region, assume_unique=False)
    depth_ok = depth.validity[rows, cols] & (np.abs(depth.values[rows, cols] - z) <= tolerance)
    return float(np.count_nonzero(in_mask & depth_ok)) / len(source.points)


def consensus_rate(a: MaskNode, b: MaskNode, depths: Mapping[int, DepthMap],
                   poses: Mapping[int, Pose], k: Intrinsics,
                   voxel_size: float = VOXEL_SIZE) -> float:
    """
    Fraction of each node's points that reproject into the other mask with
    consistent depth, taking the smaller of the two directions.
    """
    tolerance = depth_tolerance(voxel_size)
    try:
        forward = _agreement(a, b, depths[b.frame_id], poses[b.frame_id], k, tolerance)
        if forward == 0.0:
            return 0.0
        backward = _agreement(b, a, depths[a.frame_id], poses[a.frame_id], k, tolerance)
    except KeyError as e:
        raise InstanceLiftError(f"Missing depth or pose for frame {e.args[0]}")
    return min(forward, backward)


def cluster_masks(nodes: Sequence[MaskNode], depths: Mapping[int, DepthMap],
                  poses: Mapping[int, Pose], k: Intrinsics,
                  neighbor_window: int = NEIGHBOR_WINDOW,
                  merge_threshold: float = MERGE_THRESHOLD,
                  voxel_size: float = VOXEL_SIZE) -> List[Instance3D]:
    """
    Group mask nodes into instances via connected components of the
    consensus graph.

    Nodes are linked when their frames are at most `neighbor_window`
    keyframes apart and their consensus rate reaches `merge_threshold`.
    Instance ids follow the smallest (frame_id, label) member of each
    component, so the result does not depend on input order.
    """
    if not 0 < merge_threshold <= 1:
        raise InstanceLiftError("merge_threshold must lie in (0, 1]")
    if not nodes:
        return []

    ordered = sorted(nodes, key=lambda n: n.key)
    frame_rank = {fid: rank for rank, fid in enumerate(sorted({n.frame_id for n in ordered}))}

    rows, cols = [], []
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            a, b = ordered[i], ordered[j]
            if abs(frame_rank[a.frame_id] - frame_rank[b.frame_id]) > neighbor_window:
                continue
            if consensus_rate(a, b, depths, poses, k, voxel_size) >= merge_threshold:
                rows.append(i)
                cols.append(j)

    n = len(ordered)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_components, labels = connected_components(graph, directed=False)

    # ordered is sorted, so first appearance gives the smallest member key
    component_order = list(dict.fromkeys(labels.tolist()))
    instances = []
    for instance_id, component in enumerate(component_order):
        members = [ordered[i] for i in np.flatnonzero(labels == component)]
        instances.append(Instance3D.from_nodes(instance_id, members, voxel_size))

    logger.info(f"Clustered {n} masks into {n_components} instances ({len(rows)} consensus edges)")
    return instances


def spatial_agreement(a, b, voxel_size: float = VOXEL_SIZE) -> float:
    """Voxelized IoU of two point sets (Instance3D or MaskNode)."""
    keys_a = voxel_keys(a.points, voxel_size)
    keys_b = voxel_keys(b.points, voxel_size)
    if len(keys_a) == 0 and len(keys_b) == 0:
        return 0.0
    union = len(np.unique(np.vstack([keys_a, keys_b]), axis=0))
    intersection = len(keys_a) + len(keys_b) - union
    return intersection / union


def merge_by_spatial_agreement(instances: Sequence[Instance3D],
                               iou_threshold: float = IOU_THRESHOLD,
                               voxel_size: float = VOXEL_SIZE) -> List[Instance3D]:
    """
    Greedily merge the best-agreeing pair until no pair reaches iou_threshold.

    Pairs are taken by descending IoU, ties by (id_a, id_b); the merged
    instance keeps the smaller id.
    """
    if not 0 < iou_threshold <= 1:
        raise InstanceLiftError("iou_threshold must lie in (0, 1]")

    current = {inst.instance_id: inst for inst in instances}
    if len(current) != len(instances):
        raise InstanceLiftError("Instance ids must be unique")

    scores: Dict[Tuple[int, int], float] = {}
    ids = sorted(current)
    for i, id_a in enumerate(ids):
        for id_b in ids[i + 1:]:
            scores[(id_a, id_b)] = spatial_agreement(current[id_a], current[id_b], voxel_size)

    merges = 0
    while True:
        candidates = [(-iou, pair) for pair, iou in scores.items() if iou >= iou_threshold]
        if not candidates:
            break
        _, (id_a, id_b) = min(candidates)
        merged = current[id_a].merged_with(current[id_b], voxel_size)
        del current[id_b]
        current[id_a] = merged
        scores = {pair: iou for pair, iou in scores.items() if id_b not in pair and id_a not in pair}
        for other in current:
            if other != id_a:
                pair = (min(id_a, other), max(id_a, other))
                scores[pair] = spatial_agreement(current[pair[0]], current[pair[1]], voxel_size)
        merges += 1

    logger.debug(f"Spatial agreement merged {merges} instance pairs")
    return [current[i] for i in sorted(current)]


def lift_scene(observations: Sequence[FrameObservation], k: Intrinsics,
               min_pixels: int = MIN_MASK_PIXELS,
               neighbor_window: int = NEIGHBOR_WINDOW,
               merge_threshold: float = MERGE_THRESHOLD,
               iou_threshold: float = IOU_THRESHOLD,
               min_instance_points: int = MIN_INSTANCE_POINTS,
               voxel_size: float = VOXEL_SIZE) -> List[Instance3D]:
    """
    Lift, cluster, merge and denoise all masks of a scene.

    Returns:
        Instances renumbered 0..n-1 after small ones are discarded
    """
    depths = {obs.frame_id: obs.depth for obs in observations}
    poses = {obs.frame_id: obs.pose for obs in observations}

    nodes: List[MaskNode] = []
    for obs in sorted(observations, key=lambda o: o.frame_id):
        nodes.extend(lift_masks(obs.masks, obs.depth, obs.pose, k, min_pixels))
    logger.info(f"Lifted {len(nodes)} masks from {len(observations)} frames")

    instances = cluster_masks(nodes, depths, poses, k, neighbor_window, merge_threshold, voxel_size)
    instances = merge_by_spatial_agreement(instances, iou_threshold, voxel_size)

    kept = [inst for inst in instances if inst.point_count >= min_instance_points]
    if len(kept) < len(instances):
        logger.warning(f"Discarded {len(instances) - len(kept)} instances below {min_instance_points} points")
    return [inst.with_id(i) for i, inst in enumerate(kept)]
