"""
Tests for the on-disk formats.
"""

import numpy as np
import pytest

import io_formats
from exceptions import DataFormatError
from geometry import DepthMap, Pose, level_rotation


@pytest.mark.unit
class TestPoseFile:
    def test_round_trip(self, tmp_path):
        poses = [Pose(frame_id=i, rotation=level_rotation(30.0 * i, -10.0), translation=np.array([i, 2.0, 1.5]))
                 for i in range(3)]
        path = io_formats.write_pose_file(tmp_path / "poses.txt", poses)
        loaded = io_formats.read_pose_file(path)
        assert [p.frame_id for p in loaded] == [0, 1, 2]
        for a, b in zip(poses, loaded):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-8)
            np.testing.assert_allclose(a.translation, b.translation)

    def test_comments_and_blank_lines_are_skipped(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("# header\n\n7 1 2 3 0 0 0 1  # trailing\n")
        (pose,) = io_formats.read_pose_file(path)
        assert pose.frame_id == 7
        np.testing.assert_allclose(pose.translation, [1.0, 2.0, 3.0])

    def test_missing_file_names_the_path(self, tmp_path):
        with pytest.raises(DataFormatError) as exc:
            io_formats.read_pose_file(tmp_path / "poses.txt")
        assert exc.value.path.endswith("poses.txt")

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("0 1 2 3 0 0 1\n")
        with pytest.raises(DataFormatError):
            io_formats.read_pose_file(path)

    def test_duplicate_frame_id(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("0 0 0 0 0 0 0 1\n0 1 0 0 0 0 0 1\n")
        with pytest.raises(DataFormatError):
            io_formats.read_pose_file(path)


@pytest.mark.unit
class TestImages:
    def test_depth_png_stores_millimeters(self, tmp_path):
        depth = DepthMap(values=np.array([[1.2344, 0.0], [2.5, 70.0]]),
                         validity=np.array([[True, False], [True, True]]))
        path = io_formats.write_depth_png(tmp_path / "depth" / "depth_0.png", depth)
        loaded = io_formats.read_depth_png(path)
        assert loaded.values[0, 0] == pytest.approx(1.234)
        assert loaded.values[1, 0] == pytest.approx(2.5)
        # beyond the 16-bit range
        assert loaded.validity.tolist() == [[True, False], [True, False]]

    def test_label_png(self, tmp_path):
        labels = np.array([[0, 3], [1, 300]])
        path = io_formats.write_label_png(tmp_path / "mask_0.png", labels)
        np.testing.assert_array_equal(io_formats.read_label_png(path), labels)

    def test_unreadable_png(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png")
        with pytest.raises(DataFormatError):
            io_formats.read_depth_png(path)


@pytest.mark.unit
class TestJson:
    def test_jsonl_round_trip(self, tmp_path):
        records = [{"b": 1, "a": [1.5, 2]}, {"x": "y"}]
        path = io_formats.write_jsonl(tmp_path / "r.jsonl", records)
        assert io_formats.read_jsonl(path) == records

    def test_invalid_jsonl_line(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text('{"a": 1}\n{broken\n')
        with pytest.raises(DataFormatError, match="line 2"):
            io_formats.read_jsonl(path)

    def test_writes_are_byte_identical(self, tmp_path):
        data = {"z": 1, "a": [0.1, 0.2]}
        first = io_formats.write_json(tmp_path / "a.json", data).read_bytes()
        second = io_formats.write_json(tmp_path / "b.json", data).read_bytes()
        assert first == second

    def test_no_temporary_files_left(self, tmp_path):
        io_formats.write_json(tmp_path / "a.json", {"k": 1})
        assert [p.name for p in tmp_path.iterdir()] == ["a.json"]

    def test_categories_keys(self, tmp_path):
        categories = {(3, 1): "chair", (0, 2): "table"}
        path = io_formats.write_categories(tmp_path / "categories.json", categories)
        assert io_formats.read_categories(path) == categories
        assert list(io_formats.read_json(path)) == ["0:2", "3:1"]


@pytest.mark.unit
class TestPly:
    def test_mesh_round_trip(self, tmp_path):
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        triangles = np.array([[0, 1, 2], [0, 1, 3]])
        path = io_formats.write_mesh_ply(tmp_path / "mesh.ply", vertices, triangles)
        v, t = io_formats.read_ply(path)
        np.testing.assert_allclose(v, vertices)
        np.testing.assert_array_equal(t, triangles)

    def test_point_cloud_has_no_faces(self, tmp_path):
        path = io_formats.write_point_cloud_ply(tmp_path / "cloud.ply", np.array([[1.0, 2.0, 3.0]]))
        v, t = io_formats.read_ply(path)
        assert v.shape == (1, 3) and t.shape == (0, 3)


@pytest.mark.unit
class TestSceneDirectories:
    def test_single_scene_root(self, tmp_path):
        (tmp_path / io_formats.POSE_FILE).write_text("")
        assert io_formats.find_scene_dirs(tmp_path) == [tmp_path]

    def test_dataset_root_sorted(self, tmp_path):
        for name in ("b", "a", "c"):
            (tmp_path / name).mkdir()
            if name != "c":
                (tmp_path / name / io_formats.POSE_FILE).write_text("")
        assert [p.name for p in io_formats.find_scene_dirs(tmp_path)] == ["a", "b"]

    def test_scene_without_pose_file(self, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            (tmp_path / name / io_formats.INTRINSICS_FILE).write_text("{}")
        (tmp_path / "a" / io_formats.POSE_FILE).write_text("")
        with pytest.raises(DataFormatError) as excinfo:
            io_formats.find_scene_dirs(tmp_path)
        assert excinfo.value.path == str(tmp_path / "b" / io_formats.POSE_FILE)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataFormatError):
            io_formats.find_scene_dirs(tmp_path / "nope")
