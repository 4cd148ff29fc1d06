"""
Configuration management for the scene data engine.
Centralized configuration with environment variable support.

World convention used everywhere: right-handed, z-up. The ground plane is
x-y and yaw is measured about +z from +x, in degrees.
"""

import os
import json
import logging
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

from exceptions import ConfigurationError

load_dotenv()

# Application Settings
APP_NAME = "SceneDataEngine"
APP_VERSION = "1.0.0"

# Logging Configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = os.getenv("LOG_FORMAT", "json").lower()
LOG_TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
LOG_FILE = os.getenv("LOG_FILE", "")

# Parallelism
DEFAULT_JOBS = int(os.getenv("SCENE_ENGINE_JOBS", "1"))

# Geometry
ROTATION_TOLERANCE = 1e-6
VERTICAL_AXIS_TOLERANCE = 1e-6

# Curation
PARALLAX_THRESHOLD = 0.02  # fraction of image diagonal
MIN_SHARED_TRACKS = 30
SEQUENCE_WINDOW = 20
LOOP_WINDOW = 100
LOOP_TOP_K = 50
LOOP_SCORE_THRESHOLD = 0.4
CLIP_MAX_LEN = 300
CLIP_OVERLAP = 50

# Reconstruction
VOXEL_SIZE = 0.02  # m
TRUNCATION_MULTIPLIER = 4.0
MAX_WEIGHT = 64.0
FRAME_WEIGHT = 1.0
MAX_DEPTH = 10.0  # m
RADIUS_FILTER = {"radius": 0.05, "min_neighbors": 4}
STATISTICAL_FILTER = {"k": 16, "std_ratio": 2.0}

# Instance lifting
MIN_MASK_PIXELS = 50
NEIGHBOR_WINDOW = 10  # keyframes
MERGE_THRESHOLD = 0.7
IOU_THRESHOLD = 0.5
MIN_INSTANCE_POINTS = 100
MIN_DEPTH_TOLERANCE = 0.05  # m

# Scene graph
VERTICAL_EPSILON = 0.05  # m
NEAR_THRESHOLD = 1.0  # m

# VQA generation
MIN_MARGIN_M = 0.15
DIRECTION_DEADZONE_DEG = 10.0
MRA_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
TASK_CAPS = {
    "object_count": 20,
    "relative_distance": 20,
    "relative_direction": 20,
    "object_size": 20,
    "absolute_distance": 20,
    "room_size": 1,
    "route_plan": 20,
}

# VLN
CLUSTER_RADIUS = 0.5  # m
SPLIT_MIN_STEPS = 15
MAX_STEP_ROTATION = 90.0  # deg
MAX_STEP_TRANSLATION = 0.70  # m
LOOKAROUND_DEVIATION = 45.0  # deg
LOOKAROUND_MIN_TRANSLATION = 0.05  # m
FORWARD_BINS_CM = (25, 50, 75)
TURN_BINS_DEG = (15, 30, 45)
LANDMARK_RADIUS = 2.0  # m
TURN_BACK_DEG = 135.0
SCALE_GATE = (0.5, 2.0)

# Metrics
SUCCESS_RADIUS = 3.0  # m

# Synthetic scenes
SYNTH_RESOLUTION = (160, 120)
SYNTH_CATEGORY_PALETTE = {
    "sofa": (2.0, 0.9, 0.8),
    "table": (1.2, 0.8, 0.75),
    "chair": (0.5, 0.5, 0.9),
    "cabinet": (0.8, 0.45, 1.6),
    "bed": (1.9, 1.4, 0.5),
    "lamp": (0.3, 0.3, 1.4),
    "plant": (0.4, 0.4, 1.0),
    "tv_stand": (1.4, 0.4, 0.5),
    "bookshelf": (0.9, 0.35, 1.8),
    "stool": (0.4, 0.4, 0.45),
}

# Error Messages
ERROR_MESSAGES = {
    "missing_input": "Required input file not found.",
    "unknown_config_key": "Unknown configuration key '{key}' in section '{section}'.",
    "stage_error": "Stage '{stage}' failed unexpectedly.",
}


def setup_logging(level: Optional[str] = None) -> None:
    """Setup logging configuration."""
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO))

    stream = logging.StreamHandler()
    if LOG_FORMAT == "json":
        stream.setFormatter(jsonlogger.JsonFormatter(LOG_JSON_FORMAT))
    else:
        stream.setFormatter(logging.Formatter(LOG_TEXT_FORMAT))
    root.addHandler(stream)

    if LOG_FILE:
        file_handler = logging.FileHandler(LOG_FILE)
        file_handler.setFormatter(logging.Formatter(LOG_TEXT_FORMAT))
        root.addHandler(file_handler)


@dataclass
class CurationParams:
    parallax_threshold: float = PARALLAX_THRESHOLD
    min_shared_tracks: int = MIN_SHARED_TRACKS
    sequence_window: int = SEQUENCE_WINDOW
    loop_window: int = LOOP_WINDOW
    loop_top_k: int = LOOP_TOP_K
    loop_score_threshold: float = LOOP_SCORE_THRESHOLD
    loop_mode: str = "similarity"
    clip_max_len: int = CLIP_MAX_LEN
    clip_overlap: int = CLIP_OVERLAP


@dataclass
class ReconstructionParams:
    voxel_size: float = VOXEL_SIZE
    truncation_multiplier: float = TRUNCATION_MULTIPLIER
    max_weight: float = MAX_WEIGHT
    max_depth: float = MAX_DEPTH
    filter_radius: float = RADIUS_FILTER["radius"]
    filter_min_neighbors: int = RADIUS_FILTER["min_neighbors"]
    filter_k: int = STATISTICAL_FILTER["k"]
    filter_std_ratio: float = STATISTICAL_FILTER["std_ratio"]
    write_priors: bool = True


@dataclass
class SegmentationParams:
    min_pixels: int = MIN_MASK_PIXELS
    neighbor_window: int = NEIGHBOR_WINDOW
    merge_threshold: float = MERGE_THRESHOLD
    iou_threshold: float = IOU_THRESHOLD
    min_instance_points: int = MIN_INSTANCE_POINTS
    voxel_size: float = VOXEL_SIZE


@dataclass
class SceneGraphParams:
    vertical_epsilon: float = VERTICAL_EPSILON
    near_threshold: float = NEAR_THRESHOLD


@dataclass
class VqaParams:
    min_margin_m: float = MIN_MARGIN_M
    direction_deadzone_deg: float = DIRECTION_DEADZONE_DEG
    caps: Dict[str, int] = field(default_factory=lambda: dict(TASK_CAPS))


@dataclass
class VlnParams:
    cluster_radius: float = CLUSTER_RADIUS
    split_min_steps: int = SPLIT_MIN_STEPS
    max_rotation: float = MAX_STEP_ROTATION
    max_translation: float = MAX_STEP_TRANSLATION
    lookaround_deviation: float = LOOKAROUND_DEVIATION
    landmark_radius: float = LANDMARK_RADIUS
    calibrate: bool = True


@dataclass
class EvalParams:
    success_radius: float = SUCCESS_RADIUS
    iou_thresholds: Tuple[float, ...] = (0.25, 0.5)


@dataclass
class SynthParams:
    num_scenes: int = 2
    object_count: Tuple[int, int] = (7, 9)
    num_views: int = 32
    width: int = SYNTH_RESOLUTION[0]
    height: int = SYNTH_RESOLUTION[1]
    max_range: float = MAX_DEPTH


@dataclass
class StageToggles:
    reconstruct: bool = True
    segment: bool = True
    scenegraph: bool = True
    gen_vqa: bool = True
    gen_vln: bool = True


@dataclass
class PipelineConfig:
    """Effective configuration for one pipeline run."""
    input_dir: str = "data"
    output_dir: str = "output"
    seed: int = 0
    jobs: int = DEFAULT_JOBS
    stages: StageToggles = field(default_factory=StageToggles)
    curation: CurationParams = field(default_factory=CurationParams)
    reconstruction: ReconstructionParams = field(default_factory=ReconstructionParams)
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    scenegraph: SceneGraphParams = field(default_factory=SceneGraphParams)
    vqa: VqaParams = field(default_factory=VqaParams)
    vln: VlnParams = field(default_factory=VlnParams)
    evaluation: EvalParams = field(default_factory=EvalParams)
    synth: SynthParams = field(default_factory=SynthParams)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)


T = TypeVar("T")


def _build_section(cls: Type[T], data: Dict[str, Any], section: str) -> T:
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{section}' must be a JSON object.")

    known = {f.name: f for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(
                ERROR_MESSAGES["unknown_config_key"].format(key=key, section=section)
            )
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build_section(type(default), value, f"{section}.{key}")
        elif key == "caps":
            unknown = set(value) - set(TASK_CAPS)
            if unknown:
                raise ConfigurationError(
                    ERROR_MESSAGES["unknown_config_key"].format(key=sorted(unknown)[0], section=f"{section}.caps")
                )
            kwargs[key] = {**TASK_CAPS, **value}
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_pipeline_config(path: Optional[str] = None, **overrides: Any) -> PipelineConfig:
    """
    Load a pipeline configuration file.

    Args:
        path: JSON config file; defaults only when omitted
        overrides: top-level values (seed, jobs, input_dir, output_dir)
            that take precedence over the file

    Returns:
        PipelineConfig with defaults for every absent key

    Raises:
        ConfigurationError: If the file is unreadable or has unknown keys
    """
    data: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError("Config file not found.", path=str(config_path))
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file is not valid JSON: {e}", path=str(config_path))

    for key, value in overrides.items():
        if value is not None:
            data[key] = value

    config = _build_section(PipelineConfig, data, "root")
    if config.jobs < 1:
        raise ConfigurationError("jobs must be at least 1.")
    return config


def get_config(config: Optional[PipelineConfig] = None) -> Dict[str, Any]:
    """Get all configuration as dictionary."""
    effective = config or PipelineConfig()
    return {
        "app": {
            "name": APP_NAME,
            "version": APP_VERSION
        },
        "logging": {
            "level": LOG_LEVEL,
            "format": LOG_FORMAT,
            "file": LOG_FILE
        },
        "pipeline": effective.to_dict()
    }
