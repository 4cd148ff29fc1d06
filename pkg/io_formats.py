"""
File formats for the scene data engine.
Handles input validation, parsing and atomic, deterministic writes.
"""

import io
import os
import json
import logging
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import cv2
import numpy as np
from plyfile import PlyData, PlyElement

from exceptions import DataFormatError, SceneEngineError
from geometry import DepthMap, Intrinsics, Pose

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEPTH_FILE_PATTERN = "depth_{frame_id}.png"
MASK_FILE_PATTERN = "mask_{frame_id}.png"
POSE_FILE = "poses.txt"
INTRINSICS_FILE = "intrinsics.json"
CATEGORIES_FILE = "categories.json"
SPARSE_CLOUD_FILE = "sparse_points.ply"
TRACKS_FILE = "tracks.jsonl"
DESCRIPTORS_FILE = "descriptors.jsonl"
ANCHORS_FILE = "anchors.json"
SCENE_SPEC_FILE = "scene_spec.json"
GT_ANSWERS_FILE = "gt_answers.json"

# stage outputs, one directory per scene
MESH_FILE = "mesh.ply"
FUSED_CLOUD_FILE = "fused_cloud.ply"
PRIORS_DIR = "priors"
INSTANCES_FILE = "instances.json"
INSTANCE_CLOUD_PATTERN = "instance_{instance_id:03d}.ply"
SCENE_GRAPH_FILE = "scene_graph.json"
QA_FILE = "qa.jsonl"
QA_META_FILE = "qa_meta.json"
EPISODES_FILE = "episodes.jsonl"
CURATION_FILE = "curation.json"
SYNTH_META_FILE = "synth_meta.json"
EVAL_REPORT_PATTERN = "eval_{kind}.json"
MM_PER_M = 1000.0
MAX_DEPTH_MM = np.iinfo(np.uint16).max


def require_file(path: PathLike) -> Path:
    """Validate that an input file exists."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("Required input file not found.", path=str(path))
    return path


def _atomic_write(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_text(path: PathLike, text: str) -> Path:
    return _atomic_write(path, text.encode("utf-8"))


def dumps_json(data: Any) -> str:
    """Deterministic JSON text (insertion key order, no trailing whitespace)."""
    return json.dumps(data, ensure_ascii=False, separators=(", ", ": "))


def write_json(path: PathLike, data: Any) -> Path:
    """Atomically write a JSON document."""
    return write_text(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")


def read_json(path: PathLike) -> Any:
    path = require_file(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Invalid JSON: {e}", path=str(path))


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> Path:
    """Atomically write one JSON object per line."""
    lines = [dumps_json(record) for record in records]
    return write_text(path, "".join(line + "\n" for line in lines))


def iter_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    path = require_file(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"Invalid JSON on line {line_no}: {e}", path=str(path))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


# Poses

def read_pose_file(path: PathLike) -> List[Pose]:
    """
    Read a pose file: `frame_id tx ty tz qx qy qz qw` per line, `#` comments.

    Raises:
        DataFormatError: If the file is missing, malformed, or repeats a frame id
    """
    path = require_file(path)
    poses: List[Pose] = []
    seen = set()
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"Line {line_no}: expected 8 fields, got {len(parts)}", path=str(path))
        try:
            frame_id = int(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise DataFormatError(f"Line {line_no}: {e}", path=str(path))
        if frame_id in seen:
            raise DataFormatError(f"Line {line_no}: duplicate frame id {frame_id}", path=str(path))
        seen.add(frame_id)
        try:
            poses.append(Pose.from_quaternion(frame_id, values[:3], values[3:]))
        except (SceneEngineError, ValueError) as e:
            raise DataFormatError(f"Line {line_no}: {e}", path=str(path))
    logger.debug(f"Read {len(poses)} poses from {path}")
    return poses


def format_pose_file(poses: Iterable[Pose]) -> str:
    lines = ["# frame_id tx ty tz qx qy qz qw (camera-to-world, z-up world)"]
    for pose in poses:
        values = list(pose.translation) + list(pose.to_quaternion())
        lines.append(f"{pose.frame_id} " + " ".join(f"{v:.9f}" for v in values))
    return "\n".join(lines) + "\n"


def write_pose_file(path: PathLike, poses: Iterable[Pose]) -> Path:
    return write_text(path, format_pose_file(poses))


# Intrinsics

def read_intrinsics(path: PathLike) -> Intrinsics:
    data = read_json(path)
    try:
        return Intrinsics(fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]),
                          cy=float(data["cy"]), width=int(data["width"]), height=int(data["height"]))
    except (KeyError, TypeError, ValueError, SceneEngineError) as e:
        raise DataFormatError(f"Invalid intrinsics: {e}", path=str(path))


def write_intrinsics(path: PathLike, k: Intrinsics) -> Path:
    return write_json(path, k.to_dict())


# 16-bit PNG images

def _encode_png(image: np.ndarray, path: PathLike) -> bytes:
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise DataFormatError("PNG encoding failed.", path=str(path))
    return buffer.tobytes()


def _read_uint16_png(path: PathLike) -> np.ndarray:
    path = require_file(path)
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataFormatError("Unreadable PNG image.", path=str(path))
    if image.ndim != 2:
        raise DataFormatError("Expected a single-channel image.", path=str(path))
    return image.astype(np.uint16)


def write_depth_png(path: PathLike, depth: DepthMap) -> Path:
    """Write depth as 16-bit millimeters, 0 = invalid."""
    mm = np.rint(depth.values * MM_PER_M)
    valid = depth.validity & (mm >= 1) & (mm <= MAX_DEPTH_MM)
    image = np.where(valid, mm, 0).astype(np.uint16)
    return _atomic_write(path, _encode_png(image, path))


def read_depth_png(path: PathLike) -> DepthMap:
    image = _read_uint16_png(path).astype(np.float64)
    return DepthMap(values=image / MM_PER_M, validity=image > 0)


def write_label_png(path: PathLike, labels: np.ndarray) -> Path:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > MAX_DEPTH_MM:
        raise DataFormatError("Labels must fit in 16 bits.", path=str(path))
    return _atomic_write(path, _encode_png(labels.astype(np.uint16), path))


def read_label_png(path: PathLike) -> np.ndarray:
    return _read_uint16_png(path).astype(np.int64)


# Categories

def read_categories(path: PathLike) -> Dict[Tuple[int, int], str]:
    """Read `"<frame_id>:<label>" -> category` into a (frame_id, label) keyed map."""
    data = read_json(path)
    categories: Dict[Tuple[int, int], str] = {}
    for key, value in data.items():
        try:
            frame_id, label = (int(part) for part in key.split(":"))
        except ValueError:
            raise DataFormatError(f"Invalid category key '{key}'", path=str(path))
        categories[(frame_id, label)] = str(value)
    return categories


def write_categories(path: PathLike, categories: Dict[Tuple[int, int], str]) -> Path:
    ordered = {f"{f}:{l}": categories[(f, l)] for f, l in sorted(categories)}
    return write_json(path, ordered)


# PLY

def _ply_bytes(elements: List[PlyElement], path: PathLike) -> bytes:
    buffer = io.BytesIO()
    try:
        PlyData(elements, text=False, byte_order="<").write(buffer)
    except Exception as e:
        raise DataFormatError(f"PLY encoding failed: {e}", path=str(path))
    return buffer.getvalue()


def _vertex_element(vertices: np.ndarray) -> PlyElement:
    vertices = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    vertex = np.empty(len(vertices), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    vertex["x"], vertex["y"], vertex["z"] = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    return PlyElement.describe(vertex, "vertex")


def write_mesh_ply(path: PathLike, vertices: np.ndarray, triangles: np.ndarray) -> Path:
    """Binary little-endian PLY: float32 vertices, uchar-count int32 faces."""
    triangles = np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
    face = np.empty(len(triangles), dtype=[("vertex_indices", "<i4", (3,))])
    face["vertex_indices"] = triangles
    face_element = PlyElement.describe(face, "face", len_types={"vertex_indices": "u1"},
                                       val_types={"vertex_indices": "i4"})
    return _atomic_write(path, _ply_bytes([_vertex_element(vertices), face_element], path))


def write_point_cloud_ply(path: PathLike, points: np.ndarray) -> Path:
    return _atomic_write(path, _ply_bytes([_vertex_element(points)], path))


def read_ply(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read vertices and (possibly empty) triangles from a PLY file."""
    path = require_file(path)
    try:
        ply = PlyData.read(str(path))
    except Exception as e:
        raise DataFormatError(f"Unreadable PLY: {e}", path=str(path))
    vertex = ply["vertex"].data
    vertices = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float64)
    triangles = np.zeros((0, 3), dtype=np.int64)
    if "face" in [element.name for element in ply.elements]:
        faces = ply["face"].data["vertex_indices"]
        if len(faces):
            triangles = np.vstack([np.asarray(f, dtype=np.int64) for f in faces])
    return vertices, triangles


def frame_image_path(scene_dir: PathLike, kind: str, frame_id: int) -> Path:
    """Per-frame image path inside a scene directory (`depth/` or `masks/`)."""
    if kind == "depth":
        return Path(scene_dir) / "depth" / DEPTH_FILE_PATTERN.format(frame_id=frame_id)
    if kind == "mask":
        return Path(scene_dir) / "masks" / MASK_FILE_PATTERN.format(frame_id=frame_id)
    raise ValueError(f"Unknown frame image kind: {kind}")


def _is_scene_dir(path: Path) -> bool:
    return (path / POSE_FILE).is_file() or (path / INTRINSICS_FILE).is_file()


def find_scene_dirs(root: PathLike) -> List[Path]:
    """
    Scene directories under root, sorted.

    A directory holding a pose file or intrinsics is a scene and must have a
    pose file; root itself counts when it is a scene.

    Raises:
        DataFormatError: If root is missing or a scene has no pose file
    """
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError("Input directory not found.", path=str(root))
    if _is_scene_dir(root):
        scenes = [root]
    else:
        scenes = sorted(p for p in root.iterdir() if p.is_dir() and _is_scene_dir(p))
    for scene in scenes:
        require_file(scene / POSE_FILE)
    return scenes


def optional_file(path: PathLike) -> Optional[Path]:
    path = Path(path)
    return path if path.is_file() else None
