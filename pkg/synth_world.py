"""
Synthetic box-world scenes with exact ground truth.

Rooms are axis-aligned boxes [0, x] x [0, y] x [0, z] holding furniture
boxes that stand on the floor. Depth and masks come from one shared ray
caster, so both agree on every pixel.
"""

import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import io_formats
from config import SYNTH_CATEGORY_PALETTE, MAX_DEPTH, VERTICAL_EPSILON, NEAR_THRESHOLD
from curation import FrameTrack
from exceptions import SynthError
from geometry import Aabb, DepthMap, GroundPose, Intrinsics, Pose, level_rotation, project_points
from instance_lifter import FrameMaskSet
from reconstruction import SparseCloud

logger = logging.getLogger(__name__)

ROOM_X_RANGE = (7.0, 10.0)
ROOM_Y_RANGE = (6.0, 9.0)
ROOM_Z_RANGE = (2.5, 3.0)
WALL_INSET = 1.2  # m, object keep-out band along the walls
OBJECT_GAP = 0.3  # m
TOUR_INSET = 0.6  # m
MAX_TOUR_STEP = 0.65  # m, above the viewpoint cluster radius and below the step filter limit
MIN_TOUR_SIDE = 2.6  # m
TOUR_HEADING_OFFSET = 40.0  # deg, inward from the walking direction
CAMERA_HEIGHT = 1.6  # m
CAMERA_PITCH = -25.0  # deg
DOOR_WIDTH = 0.9
DOOR_HEIGHT = 2.0
MAX_PLACEMENT_TRIES = 200
MAX_LAYOUT_TRIES = 20
TRACK_DEPTH_TOLERANCE = 0.02  # m
SPARSE_POINTS = 400
SYNTH_FOCAL_FACTOR = 0.9  # focal length as a fraction of image width


def synth_intrinsics(width: int, height: int) -> Intrinsics:
    focal = SYNTH_FOCAL_FACTOR * width
    return Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


@dataclass
class SynthObject:
    category: str
    aabb: Aabb

    def to_dict(self) -> Dict[str, Any]:
        return {"category": self.category, "aabb": self.aabb.to_dict()}


@dataclass
class SceneSpec:
    """Room extents, furniture boxes, doorways and a camera tour script."""
    seed: int
    room: Tuple[float, float, float]
    objects: List[SynthObject] = field(default_factory=list)
    trajectory: List[GroundPose] = field(default_factory=list)
    doorways: List[Aabb] = field(default_factory=list)

    def __post_init__(self):
        self.room = tuple(float(v) for v in self.room)
        room_box = self.room_box
        for i, obj in enumerate(self.objects):
            if not (np.all(obj.aabb.min >= room_box.min - 1e-9) and np.all(obj.aabb.max <= room_box.max + 1e-9)):
                raise SynthError(f"Object {i} ({obj.category}) lies outside the room")

    @property
    def room_box(self) -> Aabb:
        return Aabb(min=np.zeros(3), max=np.asarray(self.room))

    @property
    def scene_id(self) -> str:
        return f"scene_{self.seed:04d}"

    def camera_poses(self, height: float = CAMERA_HEIGHT, pitch: float = CAMERA_PITCH) -> List[Pose]:
        """Camera-to-world poses of the trajectory script, frame ids in order."""
        return [Pose(frame_id=i, rotation=level_rotation(g.theta, pitch),
                     translation=np.array([g.x, g.y, height]))
                for i, g in enumerate(self.trajectory)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "room": list(self.room),
            "objects": [obj.to_dict() for obj in self.objects],
            "doorways": [d.to_dict() for d in self.doorways],
            "trajectory": [g.to_list() for g in self.trajectory],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        return cls(
            seed=int(data["seed"]),
            room=tuple(data["room"]),
            objects=[SynthObject(o["category"], Aabb.from_dict(o["aabb"])) for o in data["objects"]],
            trajectory=[GroundPose.from_list(p) for p in data.get("trajectory", [])],
            doorways=[Aabb.from_dict(d) for d in data.get("doorways", [])],
        )


def _boxes_clear(candidate: Aabb, placed: Sequence[Aabb], gap: float) -> bool:
    for other in placed:
        if np.all(candidate.min[:2] < other.max[:2] + gap) and np.all(other.min[:2] < candidate.max[:2] + gap):
            return False
    return True


def _place_objects(rng: np.random.Generator, room: Tuple[float, float, float],
                   categories: Sequence[str], palette: Mapping[str, Tuple[float, float, float]]) -> Optional[List[SynthObject]]:
    placed: List[SynthObject] = []
    for category in categories:
        dx, dy, dz = palette[category]
        if rng.random() < 0.5:
            dx, dy = dy, dx
        for _ in range(MAX_PLACEMENT_TRIES):
            x = rng.uniform(WALL_INSET, room[0] - WALL_INSET - dx)
            y = rng.uniform(WALL_INSET, room[1] - WALL_INSET - dy)
            candidate = Aabb(min=np.round([x, y, 0.0], 3), max=np.round([x + dx, y + dy, dz], 3))
            if _boxes_clear(candidate, [p.aabb for p in placed], OBJECT_GAP):
                placed.append(SynthObject(category, candidate))
                break
        else:
            return None
    return placed


def gen_tour(room: Tuple[float, float, float], num_views: int) -> List[GroundPose]:
    """
    Counter-clockwise laps along a rectangle inset from the walls.

    Each side is cut into equal steps no longer than MAX_TOUR_STEP, with the
    corners as views. The camera looks TOUR_HEADING_OFFSET degrees inward
    from the walking direction and corner views split the turn, so no step
    turns more than 45 degrees. Whole laps repeat until there are at least
    `num_views` views.
    """
    if num_views < 2:
        raise SynthError("A tour needs at least two views")
    lo = np.array([TOUR_INSET, TOUR_INSET])
    hi = np.array([room[0] - TOUR_INSET, room[1] - TOUR_INSET])
    if np.any(hi - lo < MIN_TOUR_SIDE):
        raise SynthError(f"Room {room} is too small for a tour")
    corners = [lo, np.array([hi[0], lo[1]]), hi, np.array([lo[0], hi[1]])]
    headings = (0.0, 90.0, 180.0, -90.0)

    lap = []
    for side, (a, heading) in enumerate(zip(corners, headings)):
        b = corners[(side + 1) % 4]
        steps = int(math.ceil(float(np.linalg.norm(b - a)) / MAX_TOUR_STEP))
        for i in range(steps):
            x, y = a + (b - a) * (i / steps)
            # corner views take half of the 90 degree turn
            turn = 45.0 if i == 0 else 0.0
            lap.append(GroundPose(round(float(x), 6), round(float(y), 6), heading + TOUR_HEADING_OFFSET - turn))
    laps = int(math.ceil(num_views / len(lap)))
    return lap * laps


def _doorway(rng: np.random.Generator, room: Tuple[float, float, float]) -> Aabb:
    """A door opening in the wall at x = room_x."""
    y0 = rng.uniform(0.3, room[1] - DOOR_WIDTH - 0.3)
    return Aabb(min=np.round([room[0] - 0.01, y0, 0.0], 3),
                max=np.round([room[0] + 0.01, y0 + DOOR_WIDTH, DOOR_HEIGHT], 3))


def gen_scene(seed: int, object_count: Tuple[int, int] = (7, 9),
              palette: Optional[Mapping[str, Tuple[float, float, float]]] = None,
              num_views: int = 32, with_doorway: bool = True) -> SceneSpec:
    """
    Deterministic random room with furniture boxes and a camera tour.

    One category appears twice; every other object has its own category, so
    at least three objects are needed for two distinct categories.

    Raises:
        SynthError: If the count range is invalid or no layout fits
    """
    palette = dict(palette or SYNTH_CATEGORY_PALETTE)
    low, high = object_count
    if low < 3 or high < low:
        raise SynthError(f"Invalid object count range {object_count}")
    if high - 1 > len(palette):
        raise SynthError(f"Palette of {len(palette)} categories cannot hold {high} objects")

    rng = np.random.default_rng(seed)
    for attempt in range(MAX_LAYOUT_TRIES):
        room = (round(rng.uniform(*ROOM_X_RANGE), 2), round(rng.uniform(*ROOM_Y_RANGE), 2),
                round(rng.uniform(*ROOM_Z_RANGE), 2))
        n = int(rng.integers(low, high + 1))
        names = sorted(palette)
        chosen = [names[int(i)] for i in rng.permutation(len(names))[:n - 1]]
        categories = [chosen[0]] + chosen
        objects = _place_objects(rng, room, categories, palette)
        if objects is None:
            logger.debug(f"Seed {seed}: layout attempt {attempt} failed, retrying")
            continue
        doorways = [_doorway(rng, room)] if with_doorway else []
        spec = SceneSpec(seed=seed, room=room, objects=objects,
                         trajectory=gen_tour(room, num_views), doorways=doorways)
        logger.info(f"Generated {spec.scene_id}: room {room}, {len(objects)} objects")
        return spec
    raise SynthError(f"Seed {seed}: no non-overlapping layout after {MAX_LAYOUT_TRIES} attempts")


# Ray casting

def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: Aabb) -> np.ndarray:
    """Entry distance of each ray into the box (slab method), inf on a miss."""
    safe = np.where(dirs == 0.0, 1e-300, dirs)
    with np.errstate(over="ignore", invalid="ignore"):
        t1 = (box.min - origin) / safe
        t2 = (box.max - origin) / safe
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _ray_room_exit(origin: np.ndarray, dirs: np.ndarray, room: Aabb) -> np.ndarray:
    safe = np.where(dirs == 0.0, 1e-300, dirs)
    bound = np.where(dirs > 0, room.max, room.min)
    with np.errstate(over="ignore", invalid="ignore"):
        t = (bound - origin) / safe
    t = np.where(dirs == 0.0, np.inf, t)
    return t.min(axis=-1)


def render_frame(spec: SceneSpec, pose: Pose, k: Intrinsics,
                 max_range: float = MAX_DEPTH) -> Tuple[DepthMap, np.ndarray]:
    """Depth map and label image (object index + 1, 0 for walls) from one ray cast."""
    dirs = k.pixel_rays() @ pose.rotation.T
    origin = pose.translation
    # rays have unit camera z, so the ray parameter equals camera depth
    depth = _ray_room_exit(origin, dirs, spec.room_box)
    labels = np.zeros(depth.shape, dtype=np.int64)

    if spec.doorways:
        exit_points = origin + dirs * depth[..., None]
        for door in spec.doorways:
            through = door.contains(exit_points.reshape(-1, 3), tolerance=1e-9).reshape(depth.shape)
            depth = np.where(through, np.inf, depth)

    for index, obj in enumerate(spec.objects):
        t = _ray_box(origin, dirs, obj.aabb)
        closer = t < depth
        depth = np.where(closer, t, depth)
        labels = np.where(closer, index + 1, labels)

    valid = np.isfinite(depth) & (depth <= max_range)
    labels = np.where(valid, labels, 0)
    return DepthMap(values=np.where(valid, depth, 0.0), validity=valid), labels


def render_depth(spec: SceneSpec, pose: Pose, k: Intrinsics, max_range: float = MAX_DEPTH) -> DepthMap:
    return render_frame(spec, pose, k, max_range)[0]


def render_masks(spec: SceneSpec, pose: Pose, k: Intrinsics, max_range: float = MAX_DEPTH) -> FrameMaskSet:
    labels = render_frame(spec, pose, k, max_range)[1]
    present = sorted(int(v) for v in np.unique(labels) if v > 0)
    return FrameMaskSet(frame_id=pose.frame_id, labels=labels,
                        categories={label: spec.objects[label - 1].category for label in present})


# Ground truth

def box_distance(a: Aabb, b: Aabb) -> float:
    """Closest distance between two boxes."""
    gap = np.maximum(0.0, np.maximum(a.min - b.max, b.min - a.max))
    return float(np.linalg.norm(gap))


def gt_answers(spec: SceneSpec) -> Dict[str, Any]:
    """Analytic answers: counts, sizes, pairwise distances, room area and relations."""
    counts: Dict[str, int] = {}
    for obj in spec.objects:
        counts[obj.category] = counts.get(obj.category, 0) + 1

    distances = {}
    relations = []
    for i, a in enumerate(spec.objects):
        for j in range(i + 1, len(spec.objects)):
            b = spec.objects[j]
            d = box_distance(a.aabb, b.aabb)
            distances[f"{i}-{j}"] = d
            footprint = np.all(a.aabb.min[:2] <= b.aabb.max[:2]) and np.all(b.aabb.min[:2] <= a.aabb.max[:2])
            if footprint and a.aabb.min[2] >= b.aabb.max[2] - VERTICAL_EPSILON and a.aabb.center[2] > b.aabb.center[2]:
                relations += [[i, j, "above"], [j, i, "below"]]
            elif footprint and b.aabb.min[2] >= a.aabb.max[2] - VERTICAL_EPSILON and b.aabb.center[2] > a.aabb.center[2]:
                relations += [[j, i, "above"], [i, j, "below"]]
            if d <= NEAR_THRESHOLD:
                relations.append([i, j, "near"])

    return {
        "scene_id": spec.scene_id,
        "room_extent": [spec.room[0], spec.room[1]],
        "room_area": spec.room[0] * spec.room[1],
        "counts": dict(sorted(counts.items())),
        "sizes_cm": [100.0 * float(obj.aabb.extent.max()) for obj in spec.objects],
        "categories": [obj.category for obj in spec.objects],
        "closest_distances": distances,
        "relations": relations,
    }


# Dataset artifacts

def sample_sparse_cloud(spec: SceneSpec, poses: Sequence[Pose], k: Intrinsics,
                        num_points: int = SPARSE_POINTS, seed: int = 0,
                        max_range: float = MAX_DEPTH) -> SparseCloud:
    """Sample visible surface points with the number of views that observe each."""
    rng = np.random.default_rng(seed)
    candidates = []
    for pose in poses:
        depth, _ = render_frame(spec, pose, k, max_range)
        rows, cols = np.nonzero(depth.validity)
        if len(rows) == 0:
            continue
        pick = rng.choice(len(rows), size=min(len(rows), max(1, num_points // max(len(poses), 1))), replace=False)
        z = depth.values[rows[pick], cols[pick]]
        cam = np.column_stack([(cols[pick] - k.cx) / k.fx * z, (rows[pick] - k.cy) / k.fy * z, z])
        candidates.append(pose.camera_to_world(cam))
    if not candidates:
        raise SynthError(f"{spec.scene_id}: no visible surface to sample")
    points = np.vstack(candidates)
    views = np.zeros(len(points), dtype=np.int64)
    for pose in poses:
        views += visible_points(spec, points, pose, k, max_range)
    return SparseCloud(points=points, observations=np.maximum(views, 1))


def visible_points(spec: SceneSpec, points: np.ndarray, pose: Pose, k: Intrinsics,
                   max_range: float = MAX_DEPTH) -> np.ndarray:
    """Mask of points that project into the image unoccluded."""
    depth, _ = render_frame(spec, pose, k, max_range)
    cols, rows, z, inside = project_points(points, pose, k)
    visible = np.zeros(len(points), dtype=bool)
    idx = np.flatnonzero(inside)
    seen = depth.validity[rows[idx], cols[idx]] & (np.abs(depth.values[rows[idx], cols[idx]] - z[idx]) <= TRACK_DEPTH_TOLERANCE)
    visible[idx[seen]] = True
    return visible


def render_tracks(spec: SceneSpec, cloud: SparseCloud, poses: Sequence[Pose], k: Intrinsics,
                  max_range: float = MAX_DEPTH) -> List[FrameTrack]:
    """Track observations per frame: sub-pixel projections of visible sparse points."""
    tracks = []
    for pose in poses:
        visible = np.flatnonzero(visible_points(spec, cloud.points, pose, k, max_range))
        cam = pose.world_to_camera(cloud.points[visible])
        u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
        v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
        tracks.append(FrameTrack(frame_id=pose.frame_id,
                                 observations=[(int(t), round(float(a), 4), round(float(b), 4))
                                               for t, a, b in zip(visible, u, v)]))
    return tracks


def calibration_anchors(spec: SceneSpec, pose: Pose) -> List[List[float]]:
    """(metric depth, reconstruction depth) of object centres seen from one pose; synthetic scenes are metric."""
    anchors = []
    for obj in spec.objects:
        depth = float(pose.world_to_camera(obj.aabb.center.reshape(1, 3))[0, 2])
        if depth > 0:
            anchors.append([round(depth, 6), round(depth, 6)])
    return anchors


def write_dataset(spec: SceneSpec, out_dir, width: int, height: int,
                  max_range: float = MAX_DEPTH, seed: int = 0) -> Path:
    """Write one scene in the pipeline's input formats plus its ground truth."""
    scene_dir = Path(out_dir) / spec.scene_id
    k = synth_intrinsics(width, height)
    poses = spec.camera_poses()
    if not poses:
        raise SynthError(f"{spec.scene_id}: scene has no trajectory")

    categories: Dict[Tuple[int, int], str] = {}
    for pose in poses:
        depth, labels = render_frame(spec, pose, k, max_range)
        io_formats.write_depth_png(io_formats.frame_image_path(scene_dir, "depth", pose.frame_id), depth)
        io_formats.write_label_png(io_formats.frame_image_path(scene_dir, "mask", pose.frame_id), labels)
        for label in np.unique(labels):
            if label > 0:
                categories[(pose.frame_id, int(label))] = spec.objects[int(label) - 1].category

    cloud = sample_sparse_cloud(spec, poses, k, seed=seed, max_range=max_range)
    io_formats.write_pose_file(scene_dir / io_formats.POSE_FILE, poses)
    io_formats.write_intrinsics(scene_dir / io_formats.INTRINSICS_FILE, k)
    io_formats.write_categories(scene_dir / io_formats.CATEGORIES_FILE, categories)
    io_formats.write_point_cloud_ply(scene_dir / io_formats.SPARSE_CLOUD_FILE, cloud.points)
    io_formats.write_jsonl(scene_dir / io_formats.TRACKS_FILE,
                           [t.to_dict() for t in render_tracks(spec, cloud, poses, k, max_range)])
    io_formats.write_json(scene_dir / io_formats.ANCHORS_FILE, {"anchors": calibration_anchors(spec, poses[0])})
    io_formats.write_json(scene_dir / io_formats.SCENE_SPEC_FILE, spec.to_dict())
    io_formats.write_json(scene_dir / io_formats.GT_ANSWERS_FILE, gt_answers(spec))
    logger.info(f"Wrote synthetic scene {spec.scene_id} with {len(poses)} frames to {scene_dir}")
    return scene_dir
