"""
Shared geometric types and projection math.

World frame: right-handed, z-up, ground plane x-y, yaw about +z from +x.
Camera frame: +x right, +y down, +z forward (optical axis). Pixel centres
sit at integer coordinates. Angles are degrees in every public interface.
"""

import math
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import ROTATION_TOLERANCE, VERTICAL_AXIS_TOLERANCE
from exceptions import GeometryError

logger = logging.getLogger(__name__)


def wrap_degrees(angle: float) -> float:
    """Wrap an angle in degrees into (-180, 180]."""
    wrapped = math.fmod(angle, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""
    frame_id: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen_array(self.rotation)
        translation = _frozen_array(self.translation)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise GeometryError(f"Pose {self.frame_id}: expected 3x3 rotation and 3-vector translation")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ROTATION_TOLERANCE * 10):
            raise GeometryError(f"Pose {self.frame_id}: rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE * 10:
            raise GeometryError(f"Pose {self.frame_id}: rotation determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def from_quaternion(cls, frame_id: int, translation: Sequence[float],
                        quaternion_xyzw: Sequence[float]) -> "Pose":
        """Build a pose from a scalar-last quaternion."""
        matrix = Rotation.from_quat(np.asarray(quaternion_xyzw, dtype=np.float64)).as_matrix()
        return cls(frame_id=int(frame_id), rotation=matrix, translation=np.asarray(translation))

    def to_quaternion(self) -> np.ndarray:
        """Scalar-last quaternion (x, y, z, w) with w >= 0."""
        quat = Rotation.from_matrix(self.rotation).as_quat()
        return -quat if quat[3] < 0 else quat

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation[:, 2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) camera points into the world frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model without distortion."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("Focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("Principal point must lie inside the image")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray per pixel with unit z, shape (H, W, 3)."""
        cols, rows = np.meshgrid(np.arange(self.width, dtype=np.float64),
                                 np.arange(self.height, dtype=np.float64))
        return np.stack([(cols - self.cx) / self.fx, (rows - self.cy) / self.fy,
                         np.ones_like(cols)], axis=-1)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel metric depth with a validity mask."""
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        validity = np.array(self.validity, dtype=bool)
        if values.shape != validity.shape or values.ndim != 2:
            raise GeometryError("Depth values and validity must be matching 2D arrays")
        validity &= np.isfinite(values) & (values > 0)
        values = np.where(validity, values, 0.0)
        values.setflags(write=False)
        validity.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """Valid wherever the depth is finite and positive."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values=values, validity=np.isfinite(values) & (values > 0))

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthMap":
        return cls(values=np.zeros((height, width)), validity=np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid_count(self) -> int:
        return int(self.validity.sum())


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned bounding box in meters."""
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen_array(self.min)
        hi = _frozen_array(self.max)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi):
            raise GeometryError(f"Invalid AABB: min={lo.tolist()} max={hi.tolist()}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "Aabb":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise GeometryError("Cannot bound an empty point set")
        return cls(min=points.min(axis=0), max=points.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    def volume(self) -> float:
        return float(np.prod(self.extent))

    def intersection(self, other: "Aabb") -> Optional["Aabb"]:
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        if np.any(lo > hi):
            return None
        return Aabb(min=lo, max=hi)

    def contains(self, points: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.min - tolerance) & (points <= self.max + tolerance), axis=1)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Aabb":
        return cls(min=np.asarray(data["min"]), max=np.asarray(data["max"]))


@dataclass(frozen=True)
class GroundPose:
    """Camera pose on the ground plane: position in meters, yaw in degrees."""
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise GeometryError("Ground pose values must be finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_degrees(float(self.theta)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def distance_to(self, other: "GroundPose") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)

    def to_list(self) -> list:
        return [self.x, self.y, self.theta]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "GroundPose":
        return cls(x=values[0], y=values[1], theta=values[2])


def level_rotation(yaw_deg: float, pitch_deg: float = 0.0, roll_deg: float = 0.0) -> np.ndarray:
    """
    Camera-to-world rotation of a camera whose optical axis has the given yaw.

    At zero pitch and roll the camera looks along the horizontal direction
    at `yaw_deg`, with image-down pointing to world -z. Positive pitch tilts
    the optical axis upward; roll spins the camera about its optical axis.
    """
    yaw = math.radians(yaw_deg)
    pitch = math.radians(pitch_deg)
    forward = np.array([math.cos(pitch) * math.cos(yaw),
                        math.cos(pitch) * math.sin(yaw),
                        math.sin(pitch)])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.cross(forward, right)
    base = np.column_stack([right, down, forward])
    if roll_deg:
        base = base @ Rotation.from_euler("z", roll_deg, degrees=True).as_matrix()
    return base


def project(point: Sequence[float], pose: Pose, k: Intrinsics) -> Optional[Tuple[float, float, float]]:
    """
    Project a world point into the image.

    Returns:
        (u, v, depth) when the point is in front of the camera and inside
        the image, None otherwise
    """
    cam = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    z = cam[2]
    if z <= 0:
        return None
    u = k.fx * cam[0] / z + k.cx
    v = k.fy * cam[1] / z + k.cy
    if not (-0.5 <= u < k.width - 0.5 and -0.5 <= v < k.height - 0.5):
        return None
    return float(u), float(v), float(z)


def project_points(points: np.ndarray, pose: Pose, k: Intrinsics) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized projection of (N, 3) world points.

    Returns:
        Tuple of (cols, rows, depths, inside) where cols/rows are the rounded
        pixel indices and `inside` marks points in front of the camera and
        inside the image
    """
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = k.fx * cam[:, 0] / safe_z + k.cx
    v = k.fy * cam[:, 1] / safe_z + k.cy
    cols = np.floor(u + 0.5).astype(np.int64)
    rows = np.floor(v + 0.5).astype(np.int64)
    inside = in_front & (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)
    return cols, rows, z, inside


def unproject(u: float, v: float, depth: float, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Lift a pixel with camera depth to a world point."""
    if not depth > 0:
        raise GeometryError(f"Depth must be positive, got {depth}")
    cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.camera_to_world(cam.reshape(1, 3))[0]


def unproject_depth(depth: DepthMap, pose: Pose, k: Intrinsics,
                    mask: Optional[np.ndarray] = None) -> np.ndarray:
    """World points for every valid pixel (optionally restricted by mask), row-major order."""
    if depth.width != k.width or depth.height != k.height:
        raise GeometryError("Depth map size does not match intrinsics")
    selected = depth.validity if mask is None else (depth.validity & mask)
    rows, cols = np.nonzero(selected)
    z = depth.values[rows, cols]
    cam = np.column_stack([(cols - k.cx) / k.fx * z, (rows - k.cy) / k.fy * z, z])
    return pose.camera_to_world(cam)


def ground_pose(pose: Pose) -> GroundPose:
    """Project a camera pose onto the ground plane as (x, y, yaw)."""
    forward = pose.forward
    horizontal = math.hypot(forward[0], forward[1])
    if horizontal < VERTICAL_AXIS_TOLERANCE:
        raise GeometryError(f"Pose {pose.frame_id}: optical axis is vertical, yaw undefined")
    theta = math.degrees(math.atan2(forward[1], forward[0]))
    return GroundPose(x=pose.translation[0], y=pose.translation[1], theta=theta)


def rotate_about_z(pose: Pose, alpha_deg: float) -> Pose:
    """Compose a pose with a world z-rotation by alpha about the origin."""
    rz = Rotation.from_euler("z", alpha_deg, degrees=True).as_matrix()
    return Pose(frame_id=pose.frame_id, rotation=rz @ pose.rotation, translation=rz @ pose.translation)
