"""
Tests for configuration loading and logging setup.
"""

import json
import logging

import pytest

import config
from config import PipelineConfig, get_config, load_pipeline_config, setup_logging
from exceptions import ConfigurationError


def write_config(tmp_path, data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


@pytest.mark.unit
class TestLoadPipelineConfig:
    def test_defaults(self):
        cfg = load_pipeline_config()
        assert cfg == PipelineConfig()
        assert cfg.reconstruction.voxel_size == 0.02
        assert cfg.segmentation.merge_threshold == 0.7
        assert cfg.vln.split_min_steps == 15
        assert cfg.evaluation.success_radius == 3.0

    def test_nested_sections(self, tmp_path):
        path = write_config(tmp_path, {"seed": 4, "vqa": {"min_margin_m": 0.3, "caps": {"room_size": 0}},
                                       "stages": {"gen_vln": False}})
        cfg = load_pipeline_config(path)
        assert cfg.seed == 4
        assert cfg.vqa.min_margin_m == 0.3
        assert cfg.vqa.caps["room_size"] == 0 and cfg.vqa.caps["object_count"] == 20
        assert cfg.stages.gen_vln is False and cfg.stages.gen_vqa is True

    def test_overrides_win_and_none_is_skipped(self, tmp_path):
        path = write_config(tmp_path, {"seed": 4, "jobs": 2})
        cfg = load_pipeline_config(path, seed=9, jobs=None)
        assert cfg.seed == 9 and cfg.jobs == 2

    def test_tuples_from_lists(self, tmp_path):
        cfg = load_pipeline_config(write_config(tmp_path, {"synth": {"object_count": [5, 6]}}))
        assert cfg.synth.object_count == (5, 6)

    @pytest.mark.parametrize("data", [{"colour": 1}, {"vln": {"radius": 1.0}}, {"vqa": {"caps": {"trivia": 3}}},
                                      {"stages": True}])
    def test_rejects_unknown_or_malformed(self, tmp_path, data):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(write_config(tmp_path, data))

    def test_jobs_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(jobs=0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as excinfo:
            load_pipeline_config(str(tmp_path / "absent.json"))
        assert "absent.json" in excinfo.value.to_record()["path"]

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{seed: 1", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_pipeline_config(str(path))

    def test_get_config(self):
        summary = get_config()
        assert summary["app"]["name"] == config.APP_NAME
        assert summary["pipeline"]["segmentation"]["iou_threshold"] == 0.5


@pytest.mark.unit
@pytest.mark.usefixtures("restore_root_logger")
class TestSetupLogging:
    def test_json_handler(self, monkeypatch):
        monkeypatch.setattr(config, "LOG_FORMAT", "json")
        monkeypatch.setattr(config, "LOG_FILE", "")
        setup_logging("debug")
        root = logging.getLogger()
        assert root.level == logging.DEBUG
        assert len(root.handlers) == 1
        assert type(root.handlers[0].formatter).__name__ == "JsonFormatter"

    def test_text_handler_and_file(self, monkeypatch, tmp_path):
        log_file = tmp_path / "engine.log"
        monkeypatch.setattr(config, "LOG_FORMAT", "text")
        monkeypatch.setattr(config, "LOG_FILE", str(log_file))
        setup_logging("warning")
        logging.getLogger("scene").warning("hello")
        root = logging.getLogger()
        assert root.level == logging.WARNING
        assert len(root.handlers) == 2
        for handler in root.handlers:
            handler.flush()
        assert "hello" in log_file.read_text()
