"""
Shared fixtures for the scene data engine tests.
"""

import copy
import logging

import numpy as np
import pytest

from config import PipelineConfig, load_pipeline_config
from geometry import Intrinsics, Pose, level_rotation
from synth_world import gen_scene, synth_intrinsics

FAST_SETTINGS = {
    "seed": 0,
    "jobs": 1,
    "reconstruction": {"voxel_size": 0.1, "filter_radius": 0.25, "filter_min_neighbors": 2},
    "segmentation": {"voxel_size": 0.05, "min_pixels": 10, "min_instance_points": 10},
    "synth": {"num_scenes": 1, "num_views": 24, "width": 64, "height": 48},
}


@pytest.fixture
def intrinsics():
    """Small 80x60 pinhole camera."""
    return Intrinsics(fx=60.0, fy=60.0, cx=40.0, cy=30.0, width=80, height=60)


@pytest.fixture
def level_pose():
    """Camera at (0, 0, 1.5) looking along +x."""
    return Pose(frame_id=0, rotation=level_rotation(0.0), translation=np.array([0.0, 0.0, 1.5]))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_scene():
    """A deterministic synthetic room with a short tour."""
    return gen_scene(3, object_count=(7, 9), num_views=24)


@pytest.fixture(scope="session")
def small_camera():
    return synth_intrinsics(64, 48)


@pytest.fixture(scope="session")
def fast_settings():
    """Top-level overrides for quick end-to-end runs."""
    return copy.deepcopy(FAST_SETTINGS)


@pytest.fixture
def fast_config(tmp_path) -> PipelineConfig:
    """Pipeline settings coarse enough for end-to-end runs in tests."""
    return load_pipeline_config(None, input_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "out"),
                                **FAST_SETTINGS)


@pytest.fixture
def restore_root_logger():
    """Put back the root logger handlers replaced by setup_logging."""
    root = logging.getLogger()
    saved_handlers, saved_level = list(root.handlers), root.level
    yield root
    for handler in list(root.handlers):
        handler.close()
        root.removeHandler(handler)
    root.handlers[:] = saved_handlers
    root.setLevel(saved_level)
