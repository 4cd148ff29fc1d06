"""
Tests for question generation and MCA / NA evaluation.
"""

import math

import numpy as np
import pytest

from exceptions import MetricError, QuestionGenerationError
from geometry import GroundPose
from instance_lifter import Instance3D
from navigation import ActionSequence, NavEpisode, SummaryEntry
from scene_graph import SceneGraph, build_graph
from synth_world import gen_scene
from vqa_generator import (BLANK, DIRECTIONS, LETTERS, GenConfig, QaItem, VqaEngine, classify_direction,
                           direction_angle, eval_mca, eval_na_mra, evaluate_predictions, format_number,
                           qa_statistics, recompute_answer)


def box_instance(instance_id, lo, hi, category, step=0.2):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    axes = [np.linspace(l, h, max(2, int(round((h - l) / step)) + 1)) for l, h in zip(lo, hi)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return Instance3D(instance_id=instance_id, points=points, members=[], category=category)


def synth_graph(seed):
    spec = gen_scene(seed)
    instances = [box_instance(i, o.aabb.min, o.aabb.max, o.category) for i, o in enumerate(spec.objects)]
    return spec, build_graph(instances)


def row_graph():
    """A target and four candidates whose gaps to it are 1, 2, 3 and 4 m."""
    instances = [box_instance(0, [0, 0, 0], [1, 1, 1], "bed")]
    for i, category in enumerate(["chair", "desk", "lamp", "sofa"], start=1):
        instances.append(box_instance(i, [1.0 + i, 0, 0], [2.0 + i, 1, 1], category))
    return build_graph(instances)


def episode(turns, episode_id="s_ep000"):
    summary = [SummaryEntry("forward", "sofa")]
    for turn in turns:
        summary += [SummaryEntry(turn), SummaryEntry("forward")]
    summary.append(SummaryEntry("stop"))
    start = GroundPose(0.0, 0.0, 0.0)
    return NavEpisode(episode_id=episode_id, scene_id="s", start=start, gt_path=[start],
                      actions=ActionSequence(), summary=summary)


def mca_item(item_id, answer="A"):
    return QaItem(id=item_id, scene_id="s", task="relative_direction", format="MCA", question="?",
                  answer=answer, options=list(zip(LETTERS, DIRECTIONS)))


def brute_distance(a, b):
    return np.linalg.norm(a.points[:, None, :] - b.points[None, :, :], axis=2).min()


@pytest.mark.unit
class TestFormatNumber:
    @pytest.mark.parametrize("value,decimals,expected", [
        (2.5, 0, "3"), (0.05, 1, "0.1"), (120.00000000000001, 0, "120"), (-1.25, 1, "-1.3"), (7.0, 1, "7.0"),
    ])
    def test_half_away_from_zero(self, value, decimals, expected):
        assert format_number(value, decimals) == expected


@pytest.mark.unit
class TestQaItem:
    def test_mca_needs_three_or_four_options(self):
        with pytest.raises(QuestionGenerationError):
            QaItem(id="x", scene_id="s", task="route_plan", format="MCA", question="?", answer="A",
                   options=[("A", "turn left"), ("B", "turn right")])

    def test_options_must_be_distinct(self):
        with pytest.raises(QuestionGenerationError):
            QaItem(id="x", scene_id="s", task="route_plan", format="MCA", question="?", answer="A",
                   options=[("A", "turn left"), ("B", "turn left"), ("C", "turn back")])

    def test_answer_must_be_an_option(self):
        with pytest.raises(QuestionGenerationError):
            mca_item("x", answer="E")

    def test_numeric_answer(self):
        with pytest.raises(QuestionGenerationError):
            QaItem(id="x", scene_id="s", task="room_size", format="NA", question="?", answer="big")

    def test_record_round_trip(self):
        item = mca_item("x", "C")
        assert QaItem.from_dict(item.to_dict()) == item
        assert "options" not in QaItem(id="y", scene_id="s", task="room_size", format="NA",
                                       question="?", answer="9.0").to_dict()


@pytest.mark.unit
class TestObjectCount:
    def test_only_repeated_categories(self):
        instances = [box_instance(i, [2.0 * i, 0, 0], [2.0 * i + 0.5, 0.5, 0.5], "chair") for i in range(3)]
        instances.append(box_instance(3, [8, 0, 0], [9, 1, 1], "table"))
        items = VqaEngine().generate("s", build_graph(instances), tasks=["object_count"])
        assert [(i.provenance["category"], i.answer) for i in items] == [("chair", "3")]

    def test_synth_counts(self):
        spec, graph = synth_graph(2)
        items = VqaEngine().generate(spec.scene_id, graph, tasks=["object_count"])
        categories = [o.category for o in spec.objects]
        expected = {c: str(categories.count(c)) for c in set(categories) if categories.count(c) > 1}
        assert {i.provenance["category"]: i.answer for i in items} == expected


@pytest.mark.unit
class TestRelativeDistance:
    def test_nearest_candidate_wins(self):
        items = VqaEngine().generate("s", row_graph(), tasks=["relative_distance"])
        (item,) = [i for i in items if i.provenance["target"] == 0]
        assert dict(item.options)[item.answer] == "chair"
        assert len(item.options) == 4

    def test_ambiguous_items_skipped(self):
        cfg = GenConfig(min_margin_m=1.5)
        assert VqaEngine().generate("s", row_graph(), cfg=cfg, tasks=["relative_distance"]) == []

    def test_too_few_unique_objects(self):
        graph = build_graph([box_instance(i, [2.0 * i, 0, 0], [2.0 * i + 1, 1, 1], f"c{i}") for i in range(4)])
        assert VqaEngine().generate("s", graph, tasks=["relative_distance"]) == []

    def test_synth_answers_match_distance_ranking(self):
        spec, graph = synth_graph(9)
        items = VqaEngine().generate(spec.scene_id, graph, cfg=GenConfig(seed=9), tasks=["relative_distance"])
        assert items
        for item in items:
            target = graph.node(item.provenance["target"])
            distances = [brute_distance(target, graph.node(c)) for c in item.provenance["candidates"]]
            assert item.answer == LETTERS[int(np.argmin(distances))]
            assert sorted(distances)[1] - sorted(distances)[0] >= 0.15


@pytest.mark.unit
class TestRelativeDirection:
    def test_straight_ahead_is_front(self):
        angle = direction_angle(np.zeros(3), np.array([2.0, 0.0, 0.0]), np.array([4.0, 0.0, 0.0]))
        assert classify_direction(angle) == "front"

    def test_counterclockwise_quarter_is_left(self):
        angle = direction_angle(np.zeros(3), np.array([2.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0]))
        assert angle == pytest.approx(90.0)
        assert classify_direction(angle) == "left"

    @pytest.mark.parametrize("angle,expected", [(-90.0, "right"), (180.0, "back"), (-170.0, "back"),
                                                (44.0, "front"), (46.0, "left")])
    def test_quadrants(self, angle, expected):
        assert classify_direction(angle) == expected

    def test_coincident_points_are_undefined(self):
        assert direction_angle(np.zeros(3), np.zeros(3), np.ones(3)) is None

    def test_synth_answers_match_atan2(self):
        spec, graph = synth_graph(4)
        items = VqaEngine().generate(spec.scene_id, graph, cfg=GenConfig(seed=4), tasks=["relative_direction"])
        assert items
        for item in items:
            a, b, c = (graph.node(item.provenance[k]).centroid for k in ("observer", "facing", "query"))
            heading = math.degrees(math.atan2(b[1] - a[1], b[0] - a[0]))
            bearing = math.degrees(math.atan2(c[1] - a[1], c[0] - a[0]))
            angle = (bearing - heading + 180.0) % 360.0 - 180.0
            if abs(angle) <= 45.0:
                expected = "front"
            elif abs(angle) > 135.0:
                expected = "back"
            else:
                expected = "left" if angle > 0 else "right"
            assert dict(item.options)[item.answer] == expected
            assert min(abs(abs(angle) - 45.0), abs(abs(angle) - 135.0)) >= 10.0


@pytest.mark.unit
class TestMetricTasks:
    def test_object_size(self):
        graph = build_graph([box_instance(0, [0, 0, 0], [0.5, 1.2, 0.8], "sofa", step=0.1)])
        (item,) = VqaEngine().generate("s", graph, tasks=["object_size"])
        assert item.answer == "120"

    def test_absolute_distance_touching(self):
        graph = build_graph([box_instance(0, [0, 0, 0], [1, 1, 1], "bed"), box_instance(1, [1, 0, 0], [2, 1, 1], "desk")])
        (item,) = VqaEngine().generate("s", graph, tasks=["absolute_distance"])
        assert item.answer == "0.0"

    def test_absolute_distance_cubes(self):
        graph = build_graph([box_instance(0, [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5], "bed"),
                             box_instance(1, [2.5, -0.5, -0.5], [3.5, 0.5, 0.5], "desk")])
        (item,) = VqaEngine().generate("s", graph, tasks=["absolute_distance"])
        assert item.answer == "2.0"

    @pytest.mark.parametrize("extent,expected", [((4.0, 5.0), "20.0"), ((3.0, 3.0), "9.0")])
    def test_room_size(self, extent, expected):
        (item,) = VqaEngine().generate("s", SceneGraph(room_extent=extent), tasks=["room_size"])
        assert item.answer == expected

    def test_room_size_of_empty_scene_is_skipped(self):
        assert VqaEngine().generate("s", SceneGraph(), tasks=["room_size"]) == []


@pytest.mark.unit
class TestRoutePlan:
    def test_single_blank_has_three_options(self):
        (item,) = VqaEngine().generate("s", SceneGraph(), [episode(["turn left"])], tasks=["route_plan"])
        texts = [text for _, text in item.options]
        assert [l for l, _ in item.options] == ["A", "B", "C"]
        assert texts.count("turn left") == 1
        assert dict(item.options)[item.answer] == "turn left"
        assert BLANK in item.question

    def test_two_blanks_have_four_options(self):
        (item,) = VqaEngine().generate("s", SceneGraph(), [episode(["turn right", "turn left"])],
                                       tasks=["route_plan"])
        assert len(item.options) == 4
        assert [text for _, text in item.options].count("turn right, turn left") == 1
        assert dict(item.options)[item.answer] == "turn right, turn left"

    def test_long_routes_sample_distractors(self):
        turns = ["turn left", "turn right"] * 5
        (item,) = VqaEngine().generate("s", SceneGraph(), [episode(turns)], tasks=["route_plan"])
        assert len({text for _, text in item.options}) == 4

    def test_episode_without_turns_is_skipped(self):
        assert VqaEngine().generate("s", SceneGraph(), [episode([])], tasks=["route_plan"]) == []

    def test_deterministic(self):
        episodes = [episode(["turn left", "turn back"])]
        first = VqaEngine().generate("s", SceneGraph(), episodes, cfg=GenConfig(seed=3), tasks=["route_plan"])
        second = VqaEngine().generate("s", SceneGraph(), episodes, cfg=GenConfig(seed=3), tasks=["route_plan"])
        assert [i.to_dict() for i in first] == [i.to_dict() for i in second]


@pytest.mark.unit
class TestEngine:
    def test_answers_recompute_from_provenance(self):
        spec, graph = synth_graph(2)
        episodes = [episode(["turn left"], "e0"), episode(["turn back", "turn right"], "e1")]
        items = VqaEngine().generate(spec.scene_id, graph, episodes, cfg=GenConfig(seed=2))
        assert {i.task for i in items} >= {"object_count", "object_size", "room_size", "route_plan"}
        for item in items:
            assert recompute_answer(item, graph, episodes) == item.answer

    def test_identical_inputs_identical_output(self):
        spec, graph = synth_graph(5)
        first = [i.to_dict() for i in VqaEngine().generate(spec.scene_id, graph, cfg=GenConfig(seed=1))]
        second = [i.to_dict() for i in VqaEngine().generate(spec.scene_id, graph, cfg=GenConfig(seed=1))]
        assert first == second

    def test_unknown_task(self):
        with pytest.raises(QuestionGenerationError):
            VqaEngine().generate("s", SceneGraph(), tasks=["appearance_order"])

    def test_caps_limit_items(self):
        spec, graph = synth_graph(2)
        cfg = GenConfig(caps={"object_size": 2})
        assert len(VqaEngine().generate(spec.scene_id, graph, cfg=cfg, tasks=["object_size"])) == 2

    def test_invalid_config(self):
        with pytest.raises(QuestionGenerationError):
            GenConfig(caps={"object_size": 0})


@pytest.mark.unit
class TestEvaluation:
    def test_mca_accuracy(self):
        items = [mca_item(f"q{i}", "A") for i in range(4)]
        assert eval_mca({f"q{i}": "A" for i in range(4)}, items) == 1.0
        assert eval_mca({f"q{i}": "B" for i in range(4)}, items) == 0.0
        assert eval_mca({"q0": "A", "q1": "a", "q2": " A "}, items) == 0.75

    def test_mca_needs_items(self):
        with pytest.raises(MetricError):
            eval_mca({}, [])

    @pytest.mark.parametrize("pred,gt,expected", [(10.0, 10.0, 1.0), (9.0, 10.0, 0.8), (20.0, 10.0, 0.0)])
    def test_mra(self, pred, gt, expected):
        assert eval_na_mra([pred], [gt]) == pytest.approx(expected)

    def test_mra_excludes_nonpositive_ground_truth(self):
        assert eval_na_mra([5.0, 3.0], [0.0, 3.0]) == 1.0
        with pytest.raises(MetricError):
            eval_na_mra([1.0], [0.0])

    def test_mra_length_mismatch(self):
        with pytest.raises(MetricError):
            eval_na_mra([1.0, 2.0], [1.0])

    def test_mra_monotone_in_error(self):
        scores = [eval_na_mra([10.0 + e], [10.0]) for e in np.linspace(0.0, 12.0, 25)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_per_task_report(self):
        items = [mca_item("q0", "A"), mca_item("q1", "B"),
                 QaItem(id="r0", scene_id="s", task="room_size", format="NA", question="?", answer="10.0")]
        report = evaluate_predictions({"q0": "A", "q1": "A", "r0": 9.0}, items)
        assert report["relative_direction"]["score"] == 0.5
        assert report["room_size"]["score"] == pytest.approx(0.8)
        assert report["overall"] == pytest.approx(0.65)

    def test_missing_numeric_prediction_scores_zero(self):
        items = [QaItem(id="r0", scene_id="s", task="room_size", format="NA", question="?", answer="10.0")]
        assert evaluate_predictions({"r0": "n/a"}, items)["room_size"]["score"] == 0.0

    def test_statistics(self):
        items = [mca_item("q0"), mca_item("q1"),
                 QaItem(id="r0", scene_id="s", task="room_size", format="NA", question="?", answer="1")]
        stats = qa_statistics(items)
        assert stats["total"] == 3
        assert stats["by_task"] == {"relative_direction": 2, "room_size": 1}
        assert stats["by_format"] == {"MCA": 2, "NA": 1}
