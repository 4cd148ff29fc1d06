"""
Tests for path preprocessing, action encoding, scale calibration and summaries.
"""

import math

import numpy as np
import pytest

from exceptions import NavigationError
from geometry import GroundPose, wrap_degrees
from instance_lifter import Instance3D
from navigation import (STOP, ActionKind, ActionSequence, ActionStep, NavEpisode, assign_clusters,
                        build_episodes, calibrate_scale, cluster_positions, encode_actions,
                        episode_statistics, filter_steps, nearest_landmark, remove_lookaround,
                        replay_actions, revisit_candidates, split_subpaths, summarize_episode,
                        transition_errors)


def walk(points):
    """Poses along the waypoints, each facing the next one; the last keeps the previous heading."""
    poses = []
    for i, (x, y) in enumerate(points):
        if i + 1 < len(points):
            nx, ny = points[i + 1]
            theta = math.degrees(math.atan2(ny - y, nx - x))
        else:
            theta = poses[-1].theta
        poses.append(GroundPose(x, y, theta))
    return poses


def loop_then_leave():
    """A 3 m square loop at 0.6 m spacing back to the origin, then 20 steps along -x."""
    points = [(0.6 * i, 0.0) for i in range(5)]
    points += [(3.0, 0.6 * i) for i in range(5)]
    points += [(3.0 - 0.6 * i, 3.0) for i in range(5)]
    points += [(0.0, 3.0 - 0.6 * i) for i in range(5)]
    points += [(-0.6 * i, 0.0) for i in range(21)]
    return walk(points)


def instance(instance_id, x, y, category):
    points = np.array([[x - 0.1, y - 0.1, 0.0], [x + 0.1, y + 0.1, 0.5]])
    return Instance3D(instance_id=instance_id, points=points, members=[], category=category)


def random_walk(seed, n=60, scale=0.3):
    rng = np.random.default_rng(seed)
    steps = rng.normal(scale=scale, size=(n, 2))
    positions = np.cumsum(steps, axis=0)
    headings = rng.uniform(-180, 180, size=n)
    return [GroundPose(float(x), float(y), float(t)) for (x, y), t in zip(positions, headings)]


@pytest.mark.unit
class TestActionStep:
    def test_forward_needs_a_bin(self):
        with pytest.raises(NavigationError):
            ActionStep(ActionKind.FORWARD, 40)

    def test_stop_has_no_magnitude(self):
        with pytest.raises(NavigationError):
            ActionStep(ActionKind.STOP, 25)

    def test_sequences_end_with_stop(self):
        with pytest.raises(NavigationError):
            ActionSequence(steps=[ActionStep(ActionKind.FORWARD, 25)])

    def test_kind_from_string(self):
        assert ActionStep("TurnLeft", 15).signed_turn == 15.0


@pytest.mark.unit
class TestClusterPositions:
    def test_far_pose_opens_a_cluster(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.3, 0.0, 0.0), GroundPose(2.0, 0.0, 0.0)]
        assert [p.x for p in cluster_positions(path)] == [0.0, 2.0]

    def test_all_close(self):
        path = [GroundPose(0.1 * i, 0.0, 0.0) for i in range(5)]
        assert cluster_positions(path) == [path[0]]

    def test_random_walk_matches_greedy_replay(self):
        path = random_walk(8)
        representatives = cluster_positions(path)

        expected, seed = [path[0]], path[0]
        for pose in path[1:]:
            if math.hypot(pose.x - seed.x, pose.y - seed.y) > 0.5:
                expected.append(pose)
                seed = pose
        assert representatives == expected

        assignment = assign_clusters(path)
        for pose, cluster in zip(path, assignment):
            assert representatives[cluster].distance_to(pose) <= 0.5

    def test_errors(self):
        with pytest.raises(NavigationError):
            cluster_positions([])
        with pytest.raises(NavigationError):
            cluster_positions([GroundPose(0.0, 0.0, 0.0)], radius=0.0)


@pytest.mark.unit
class TestSplitSubpaths:
    def test_loop_splits_at_the_revisit(self):
        path = loop_then_leave()
        assert revisit_candidates(path) == [20]
        pieces = split_subpaths(path)
        assert [len(p) - 1 for p in pieces] == [20, 20]
        assert pieces[0][-1] == pieces[1][0]

    def test_short_left_segment_does_not_split(self):
        points = [(0.0, 0.0), (0.6, 0.0), (1.2, 0.0), (1.2, 0.6), (0.6, 0.6), (0.0, 0.3)]
        points += [(-0.6 * i, 0.3) for i in range(1, 16)]
        path = walk(points)
        assert revisit_candidates(path) == [5]
        assert split_subpaths(path) == [path]

    def test_backtracking_path_matches_exhaustive_candidates(self):
        rng = np.random.default_rng(12)
        out = np.cumsum(rng.normal(loc=[0.6, 0.0], scale=0.1, size=(25, 2)), axis=0)
        back = out[::-1][1:] + rng.normal(scale=0.05, size=(24, 2))
        path = walk([tuple(p) for p in np.vstack([[0.0, 0.0], out, back])])

        candidates = [i for i in range(len(path))
                      if any(path[j].distance_to(path[i]) <= 0.5 for j in range(i - 1))]
        assert revisit_candidates(path) == candidates

        breaks, start = [], 0
        for i in candidates:
            if i - start > 15 and len(path) - 1 - i > 15:
                breaks.append(i)
                start = i
        pieces = split_subpaths(path)
        assert len(pieces) == len(breaks) + 1
        assert [p[0] for p in pieces[1:]] == [path[i] for i in breaks]
        for piece in pieces[:-1]:
            assert len(piece) - 1 > 15

    def test_min_steps_must_be_positive(self):
        with pytest.raises(NavigationError):
            split_subpaths(loop_then_leave(), min_steps=0)


@pytest.mark.unit
class TestFilterSteps:
    def test_compliant_path_unchanged(self):
        path = walk([(0.5 * i, 0.0) for i in range(6)])
        assert filter_steps(path) == path

    def test_sharp_turn_removed(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.3, 0.0, 120.0), GroundPose(0.6, 0.0, 10.0)]
        assert filter_steps(path) == [path[0], path[2]]

    def test_teleport_removed_and_result_compliant(self):
        path = walk([(0.0, 0.0), (0.5, 0.0), (2.0, 0.0), (2.5, 0.0), (1.0, 0.1), (1.2, 0.1)])
        kept = filter_steps(path)
        assert path[2] not in kept
        for a, b in zip(kept, kept[1:]):
            assert abs(wrap_degrees(b.theta - a.theta)) <= 90.0
            assert a.distance_to(b) <= 0.70


@pytest.mark.unit
class TestRemoveLookaround:
    def test_forward_facing_walk_unchanged(self):
        path = walk([(0.4 * i, 0.0) for i in range(5)])
        assert remove_lookaround(path) == path

    def test_sideways_pose_dropped(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.4, 0.0, 90.0), GroundPose(0.8, 0.0, 0.0),
                GroundPose(1.2, 0.0, 0.0)]
        assert remove_lookaround(path) == [path[0], path[2], path[3]]

    def test_rotation_in_place_kept(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.0, 0.0, 90.0), GroundPose(0.0, 0.01, 180.0)]
        assert remove_lookaround(path) == path

    def test_injected_lookarounds_match_bearing_oracle(self, rng):
        path = walk([(0.4 * i, 0.2 * math.sin(i)) for i in range(30)])
        for i in (5, 11, 19):
            path[i] = GroundPose(path[i].x, path[i].y, path[i].theta + rng.choice([-1, 1]) * 100.0)
        dropped = [p for p in path if p not in remove_lookaround(path)]
        assert dropped == [path[5], path[11], path[19]]


@pytest.mark.unit
class TestEncodeActions:
    def test_forward_snaps_to_nearest_bin(self):
        actions = encode_actions([GroundPose(0.0, 0.0, 0.0), GroundPose(0.48, 0.0, 0.0)])
        assert list(actions) == [ActionStep(ActionKind.FORWARD, 50), STOP]

    def test_small_motion_emits_no_forward(self):
        actions = encode_actions([GroundPose(0.0, 0.0, 0.0), GroundPose(0.10, 0.0, -28.0)])
        assert list(actions) == [ActionStep(ActionKind.TURN_RIGHT, 30), STOP]

    def test_large_turn_is_chunked(self):
        actions = encode_actions([GroundPose(0.0, 0.0, 0.0), GroundPose(0.0, 0.0, 100.0)])
        assert [s.magnitude for s in actions if s.is_turn] == [45, 45, 15]

    def test_too_long_step(self):
        with pytest.raises(NavigationError):
            encode_actions([GroundPose(0.0, 0.0, 0.0), GroundPose(0.9, 0.0, 0.0)])

    def test_single_pose(self):
        assert list(encode_actions([GroundPose(1.0, 1.0, 0.0)])) == [STOP]

    def test_per_step_quantization_bounds(self):
        path = filter_steps(random_walk(21, n=80, scale=0.25))
        errors = transition_errors(path, encode_actions(path))
        assert len(errors) == len(path) - 1
        for distance_error, heading_error in errors:
            assert distance_error <= 0.125 + 1e-9
            assert heading_error <= 7.5 + 1e-9


@pytest.mark.unit
class TestReplayActions:
    def test_stop_only(self):
        start = GroundPose(1.0, 2.0, 30.0)
        assert replay_actions(start, [STOP]) == [start]

    def test_quarter_turn_then_forward(self):
        steps = [ActionStep(ActionKind.TURN_LEFT, 45), ActionStep(ActionKind.TURN_LEFT, 45),
                 ActionStep(ActionKind.FORWARD, 50), STOP]
        end = replay_actions(GroundPose(0.0, 0.0, 0.0), steps)[-1]
        assert (end.x, end.y, end.theta) == pytest.approx((0.0, 0.5, 90.0), abs=1e-9)


@pytest.mark.unit
class TestCalibrateScale:
    def test_constant_anchors(self):
        assert calibrate_scale([(2.0, 1.0)] * 4) == pytest.approx(2.0)

    def test_single_anchor(self):
        assert calibrate_scale([(3.0, 1.5)]) == pytest.approx(2.0)

    def test_outlier_is_gated(self):
        rng = np.random.default_rng(3)
        sfm = rng.uniform(0.5, 3.0, size=10)
        factors = rng.uniform(1.8, 2.2, size=10)
        factors[4] *= 10.0
        anchors = list(zip(sfm * factors, sfm))
        inliers = np.delete(factors, 4)
        assert calibrate_scale(anchors) == pytest.approx(inliers.mean())
        assert calibrate_scale(anchors[::-1]) == pytest.approx(calibrate_scale(anchors))
        assert calibrate_scale(anchors + anchors) == pytest.approx(calibrate_scale(anchors))

    @pytest.mark.parametrize("anchors", [[], [(1.0, 0.0)], [(-1.0, 1.0)]])
    def test_invalid_anchors(self, anchors):
        with pytest.raises(NavigationError):
            calibrate_scale(anchors)


@pytest.mark.unit
class TestSummaries:
    def test_straight_path_past_sofa(self):
        path = walk([(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)])
        summary = summarize_episode(path, encode_actions(path), [instance(0, 1.5, 0.5, "sofa")])
        assert [e.to_list() for e in summary] == [["forward", "sofa"], ["stop", None]]

    def test_forward_turn_forward(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.5, 0.0, 0.0), GroundPose(0.5, 0.0, 90.0),
                GroundPose(0.5, 0.5, 90.0)]
        summary = summarize_episode(path, encode_actions(path))
        assert [e.action for e in summary] == ["forward", "turn left", "forward", "stop"]
        assert all(e.landmark is None for e in summary)

    def test_about_face_reads_turn_back(self):
        path = [GroundPose(0.0, 0.0, 0.0), GroundPose(0.5, 0.0, 0.0), GroundPose(0.5, 0.0, 90.0),
                GroundPose(0.5, 0.0, 180.0), GroundPose(0.0, 0.0, 180.0)]
        summary = summarize_episode(path, encode_actions(path))
        assert [e.action for e in summary] == ["forward", "turn back", "forward", "stop"]

    def test_nearest_landmark_matches_oracle(self, rng):
        instances = [instance(i, *rng.uniform(0, 6, size=2), category=f"c{i}") for i in range(8)]
        instances.append(Instance3D(instance_id=8, points=np.zeros((1, 3)), members=[]))
        for position in rng.uniform(0, 6, size=(30, 2)):
            named = [inst for inst in instances if inst.category is not None]
            distances = [np.linalg.norm(inst.centroid[:2] - position) for inst in named]
            best = int(np.argmin(distances))
            expected = named[best].category if distances[best] <= 2.0 else None
            assert nearest_landmark(position, instances) == expected


@pytest.mark.unit
class TestBuildEpisodes:
    def test_loop_yields_two_episodes(self):
        episodes = build_episodes("scene_0001", loop_then_leave())
        assert [ep.episode_id for ep in episodes] == ["scene_0001_ep000", "scene_0001_ep001"]
        for ep in episodes:
            assert ep.gt_path[0] == ep.start
            assert list(ep.actions)[-1] == STOP
            assert ep.summary[-1].action == "stop"

        stats = episode_statistics(episodes)
        assert stats["episodes"] == 2
        assert stats["mean_path_length"] == pytest.approx(12.0)
        assert stats["mean_steps"] == pytest.approx(24.0)
        assert stats["forward_fraction"] == pytest.approx(40 / 48)

    def test_anchors_scale_the_path(self):
        path = walk([(0.15 * i, 0.0) for i in range(6)])
        (episode,) = build_episodes("s", path, anchors=[(2.0, 1.0)], cluster_radius=0.1)
        assert episode.gt_path[-1].x == pytest.approx(1.5)

    def test_empty_trajectory(self):
        assert build_episodes("s", []) == []

    def test_episode_record_round_trip(self):
        (episode, _) = build_episodes("s", loop_then_leave())
        again = NavEpisode.from_dict(episode.to_dict())
        assert list(again.actions) == list(episode.actions)
        assert again.gt_path == episode.gt_path
        assert again.summary == episode.summary

    def test_invalid_record(self):
        with pytest.raises(NavigationError):
            NavEpisode.from_dict({"episode_id": "x"})

    def test_no_episodes_statistics(self):
        assert episode_statistics([])["episodes"] == 0
