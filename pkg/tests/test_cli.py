"""
Tests for the command-line entry point.
"""

import json

import pytest

import cli
import io_formats
from exceptions import ReconstructionError

pytestmark = pytest.mark.usefixtures("restore_root_logger")


@pytest.fixture
def config_file(tmp_path, fast_settings):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(fast_settings), encoding="utf-8")
    return str(path)


def last_record(stderr):
    return json.loads(stderr.strip().splitlines()[-1])


@pytest.mark.unit
class TestParser:
    def test_stage_arguments(self):
        args = cli.build_parser().parse_args(["gen-vln", "--input", "data", "--jobs", "3"])
        assert (args.command, args.input_dir, args.jobs, args.output_dir) == ("gen-vln", "data", 3, None)

    def test_eval_needs_predictions(self):
        with pytest.raises(SystemExit) as excinfo:
            cli.build_parser().parse_args(["eval-vqa", "--output", "out"])
        assert excinfo.value.code == 2

    def test_ground_truth_only_for_detection(self):
        args = cli.build_parser().parse_args(["eval-det", "--predictions", "p.jsonl", "--ground-truth", "g.jsonl"])
        assert args.ground_truth == "g.jsonl"
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["eval-vln", "--predictions", "p.jsonl", "--ground-truth", "g.jsonl"])

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["paint"])


@pytest.mark.unit
class TestErrors:
    def test_missing_pose_file(self, tmp_path, capsys):
        scene_dir = tmp_path / "scene"
        scene_dir.mkdir()
        (scene_dir / io_formats.INTRINSICS_FILE).write_text("{}", encoding="utf-8")
        code = cli.main(["reconstruct", "--input", str(scene_dir), "--output", str(tmp_path / "out")])
        assert code == 2
        record = last_record(capsys.readouterr().err)
        assert record["error"] == "DataFormatError"
        assert record["path"] == str(scene_dir / io_formats.POSE_FILE)

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"segmentation": {"threshold": 1}}), encoding="utf-8")
        assert cli.main(["segment", "--config", str(path)]) == 2
        assert last_record(capsys.readouterr().err)["error"] == "ConfigurationError"

    def test_stage_error_record(self, mocker, capsys):
        failing = mocker.Mock(side_effect=ReconstructionError("TSDF volume is empty", path="scene_x"))
        mocker.patch.dict(cli.STAGE_COMMANDS, {"reconstruct": failing})
        assert cli.main(["reconstruct", "--seed", "5"]) == 2
        assert failing.call_args[0][0].seed == 5
        assert last_record(capsys.readouterr().err) == {
            "error": "ReconstructionError", "message": "TSDF volume is empty", "path": "scene_x"}


@pytest.mark.slow
@pytest.mark.integration
class TestEndToEnd:
    def test_synth_run_and_eval(self, tmp_path, config_file, capsys):
        data, out = str(tmp_path / "data"), str(tmp_path / "out")
        assert cli.main(["synth", "--config", config_file, "--output", data]) == 0
        assert cli.main(["run", "--config", config_file, "--input", data, "--output", out]) == 0

        scene_out = tmp_path / "out" / "scene_0000"
        qa = scene_out / io_formats.QA_FILE
        first = qa.read_bytes()
        assert cli.main(["gen-vqa", "--config", config_file, "--input", data, "--output", out]) == 0
        assert qa.read_bytes() == first

        predictions = io_formats.write_jsonl(tmp_path / "preds.jsonl", [
            {"id": item["id"], "prediction": item["answer"]} for item in io_formats.read_jsonl(qa)])
        capsys.readouterr()
        assert cli.main(["eval-vqa", "--config", config_file, "--output", out,
                         "--predictions", str(predictions)]) == 0
        table = capsys.readouterr().out
        assert "eval-vqa" in table and "overall" in table and "1.0000" in table
