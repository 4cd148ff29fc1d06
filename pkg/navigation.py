"""
Navigation episodes from free-form camera trajectories: path preprocessing,
discrete action encoding, scale calibration and landmark summaries.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import (
    CLUSTER_RADIUS, SPLIT_MIN_STEPS, MAX_STEP_ROTATION, MAX_STEP_TRANSLATION,
    LOOKAROUND_DEVIATION, LOOKAROUND_MIN_TRANSLATION, FORWARD_BINS_CM, TURN_BINS_DEG,
    LANDMARK_RADIUS, TURN_BACK_DEG, SCALE_GATE
)
from exceptions import NavigationError
from geometry import GroundPose, wrap_degrees
from instance_lifter import Instance3D
from metrics import path_length

logger = logging.getLogger(__name__)

MAX_FORWARD_CM = FORWARD_BINS_CM[-1] + FORWARD_BINS_CM[0] / 2.0
FORWARD_DEADZONE_CM = FORWARD_BINS_CM[0] / 2.0
TURN_DEADZONE_DEG = TURN_BINS_DEG[0] / 2.0
TURN_CHUNK_DEG = TURN_BINS_DEG[-1]


class ActionKind(str, Enum):
    FORWARD = "Forward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    STOP = "Stop"


@dataclass(frozen=True)
class ActionStep:
    """One discrete action; magnitude in cm for Forward, degrees for turns."""
    kind: ActionKind
    magnitude: Optional[int] = None

    def __post_init__(self):
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == ActionKind.STOP:
            if self.magnitude is not None:
                raise NavigationError("Stop carries no magnitude")
        elif kind == ActionKind.FORWARD:
            if self.magnitude not in FORWARD_BINS_CM:
                raise NavigationError(f"Forward magnitude {self.magnitude} is not one of {FORWARD_BINS_CM}")
        elif self.magnitude not in TURN_BINS_DEG:
            raise NavigationError(f"Turn magnitude {self.magnitude} is not one of {TURN_BINS_DEG}")

    @property
    def is_turn(self) -> bool:
        return self.kind in (ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT)

    @property
    def signed_turn(self) -> float:
        if self.kind == ActionKind.TURN_LEFT:
            return float(self.magnitude)
        if self.kind == ActionKind.TURN_RIGHT:
            return -float(self.magnitude)
        return 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ActionStep":
        return cls(kind=ActionKind(data["kind"]), magnitude=data.get("magnitude"))


STOP = ActionStep(ActionKind.STOP)


@dataclass
class ActionSequence:
    """Encoded actions ending in Stop; `transitions[i]` spans the steps of path transition i."""
    steps: List[ActionStep] = field(default_factory=lambda: [STOP])
    transitions: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.steps or self.steps[-1].kind != ActionKind.STOP:
            raise NavigationError("Action sequences must end with Stop")

    def __iter__(self):
        return iter(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def transition_steps(self, index: int) -> List[ActionStep]:
        start, end = self.transitions[index]
        return self.steps[start:end]

    def to_list(self) -> List[Dict[str, Any]]:
        return [step.to_dict() for step in self.steps]


@dataclass(frozen=True)
class SummaryEntry:
    action: str
    landmark: Optional[str] = None

    def to_list(self) -> list:
        return [self.action, self.landmark]


@dataclass
class NavEpisode:
    """A navigation episode; gt_path is the processed path starting at `start`."""
    episode_id: str
    scene_id: str
    start: GroundPose
    gt_path: List[GroundPose]
    actions: ActionSequence
    summary: List[SummaryEntry] = field(default_factory=list)

    @property
    def turns(self) -> List[str]:
        return [entry.action for entry in self.summary if entry.action.startswith("turn")]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "scene_id": self.scene_id,
            "start": self.start.to_list(),
            "gt_path": [p.to_list() for p in self.gt_path],
            "actions": self.actions.to_list(),
            "summary": [entry.to_list() for entry in self.summary],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NavEpisode":
        try:
            steps = [ActionStep.from_dict(a) for a in data["actions"]]
            return cls(
                episode_id=str(data["episode_id"]),
                scene_id=str(data["scene_id"]),
                start=GroundPose.from_list(data["start"]),
                gt_path=[GroundPose.from_list(p) for p in data["gt_path"]],
                actions=ActionSequence(steps=steps),
                summary=[SummaryEntry(action=a, landmark=l) for a, l in data.get("summary", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise NavigationError(f"Invalid episode record: {e}")


# Path preprocessing

def assign_clusters(path: Sequence[GroundPose], radius: float = CLUSTER_RADIUS) -> List[int]:
    """
    Cluster index per pose by greedy sequential clustering.

    A cluster opens at the first unassigned pose and absorbs the following
    poses while they stay within `radius` of that seed.
    """
    if not path:
        raise NavigationError("Cannot cluster an empty path")
    if radius <= 0:
        raise NavigationError("Cluster radius must be positive")

    assignment = [0]
    seed = path[0]
    for pose in path[1:]:
        if seed.distance_to(pose) <= radius:
            assignment.append(assignment[-1])
        else:
            assignment.append(assignment[-1] + 1)
            seed = pose
    return assignment


def cluster_positions(path: Sequence[GroundPose], radius: float = CLUSTER_RADIUS) -> List[GroundPose]:
    """First pose of each sequential cluster, in temporal order."""
    assignment = assign_clusters(path, radius)
    representatives = [path[0]]
    for i in range(1, len(path)):
        if assignment[i] != assignment[i - 1]:
            representatives.append(path[i])
    logger.debug(f"Clustered {len(path)} poses into {len(representatives)} viewpoints")
    return representatives


def revisit_candidates(path: Sequence[GroundPose], radius: float = CLUSTER_RADIUS) -> List[int]:
    """Indices of poses lying within radius of some earlier, non-adjacent pose."""
    positions = np.array([p.position for p in path])
    candidates = []
    for i in range(2, len(path)):
        distances = np.linalg.norm(positions[:i - 1] - positions[i], axis=1)
        if np.any(distances <= radius):
            candidates.append(i)
    return candidates


def split_subpaths(path: Sequence[GroundPose], min_steps: int = SPLIT_MIN_STEPS,
                   radius: float = CLUSTER_RADIUS) -> List[List[GroundPose]]:
    """
    Split a clustered path at revisited viewpoints.

    Candidates are taken left to right; a split at pose i happens only when
    both the segment since the last split and the remainder of the path
    have more than `min_steps` steps. Adjacent sub-paths share the break pose.
    """
    if min_steps < 1:
        raise NavigationError("min_steps must be at least 1")
    path = list(path)
    last = len(path) - 1
    start = 0
    pieces = []
    for i in revisit_candidates(path, radius):
        if i - start > min_steps and last - i > min_steps:
            pieces.append(path[start:i + 1])
            start = i
    pieces.append(path[start:])
    if len(pieces) > 1:
        logger.info(f"Split a {last}-step path into {len(pieces)} sub-paths")
    return pieces


def filter_steps(path: Sequence[GroundPose], max_rot: float = MAX_STEP_ROTATION,
                 max_trans: float = MAX_STEP_TRANSLATION) -> List[GroundPose]:
    """Drop poses reached by a turn above max_rot or a move above max_trans."""
    if not path:
        return []
    kept = [path[0]]
    for pose in path[1:]:
        anchor = kept[-1]
        if abs(wrap_degrees(pose.theta - anchor.theta)) > max_rot or anchor.distance_to(pose) > max_trans:
            continue
        kept.append(pose)
    if len(kept) < len(path):
        logger.debug(f"Step filter removed {len(path) - len(kept)} poses")
    return kept


def _bearing(a: GroundPose, b: GroundPose) -> float:
    return math.degrees(math.atan2(b.y - a.y, b.x - a.x))


def remove_lookaround(path: Sequence[GroundPose], deviation_threshold: float = LOOKAROUND_DEVIATION,
                      min_translation: float = LOOKAROUND_MIN_TRANSLATION) -> List[GroundPose]:
    """Drop interior poses that look away from the walking direction while moving."""
    if len(path) < 3:
        return list(path)
    kept = [path[0]]
    for i in range(1, len(path) - 1):
        current, following = path[i], path[i + 1]
        moving = current.distance_to(following) > min_translation
        if moving and abs(wrap_degrees(current.theta - _bearing(current, following))) > deviation_threshold:
            continue
        kept.append(current)
    kept.append(path[-1])
    return kept


# Action encoding

def _nearest_bin(value: float, bins: Sequence[int]) -> int:
    return min(bins, key=lambda b: (abs(value - b), b))


def _encode_turn(delta: float) -> List[ActionStep]:
    kind = ActionKind.TURN_LEFT if delta > 0 else ActionKind.TURN_RIGHT
    remaining = abs(delta)
    steps = []
    while remaining >= TURN_CHUNK_DEG + TURN_DEADZONE_DEG:
        steps.append(ActionStep(kind, TURN_CHUNK_DEG))
        remaining -= TURN_CHUNK_DEG
    if remaining >= TURN_DEADZONE_DEG:
        steps.append(ActionStep(kind, _nearest_bin(remaining, TURN_BINS_DEG)))
    return steps


def _encode_forward(distance_m: float) -> List[ActionStep]:
    cm = distance_m * 100.0
    if cm > MAX_FORWARD_CM:
        raise NavigationError(f"Step of {cm:.1f} cm exceeds the largest forward bin")
    if cm < FORWARD_DEADZONE_CM:
        return []
    return [ActionStep(ActionKind.FORWARD, _nearest_bin(cm, FORWARD_BINS_CM))]


def encode_actions(path: Sequence[GroundPose]) -> ActionSequence:
    """
    Encode a preprocessed path as turn-then-forward actions per transition.

    Turns are decomposed into 45 degree chunks plus a snapped remainder;
    motions below half the smallest bin emit nothing.

    Raises:
        NavigationError: If a transition moves further than the largest bin allows
    """
    steps: List[ActionStep] = []
    transitions: List[Tuple[int, int]] = []
    for a, b in zip(path, path[1:]):
        start = len(steps)
        steps += _encode_turn(wrap_degrees(b.theta - a.theta))
        steps += _encode_forward(a.distance_to(b))
        transitions.append((start, len(steps)))
    steps.append(STOP)
    return ActionSequence(steps=steps, transitions=transitions)


def apply_action(pose: GroundPose, step: ActionStep) -> GroundPose:
    if step.is_turn:
        return GroundPose(pose.x, pose.y, pose.theta + step.signed_turn)
    if step.kind == ActionKind.FORWARD:
        heading = math.radians(pose.theta)
        meters = step.magnitude / 100.0
        return GroundPose(pose.x + meters * math.cos(heading), pose.y + meters * math.sin(heading), pose.theta)
    return pose


def replay_actions(start: GroundPose, actions: Sequence[ActionStep]) -> List[GroundPose]:
    """Start pose followed by the pose after every non-Stop action."""
    poses = [start]
    for step in actions:
        if step.kind == ActionKind.STOP:
            break
        poses.append(apply_action(poses[-1], step))
    return poses


def transition_errors(path: Sequence[GroundPose], actions: ActionSequence) -> List[Tuple[float, float]]:
    """
    Per-transition (distance error in m, heading error in deg) of the encoding.

    Each transition is replayed from the true pose it starts at; the distance
    error compares travelled and true planar distance.
    """
    errors = []
    for i, (a, b) in enumerate(zip(path, path[1:])):
        steps = actions.transition_steps(i)
        travelled = sum(s.magnitude for s in steps if s.kind == ActionKind.FORWARD) / 100.0
        turned = sum(s.signed_turn for s in steps)
        errors.append((abs(travelled - a.distance_to(b)),
                       abs(wrap_degrees(a.theta + turned - b.theta))))
    return errors


# Scale calibration

def calibrate_scale(anchors: Sequence[Tuple[float, float]]) -> float:
    """
    Metric scale from (mono_depth, sfm_depth) anchor pairs.

    Per-anchor factors outside [0.5, 2] x their median are discarded before
    averaging.

    Raises:
        NavigationError: If there are no anchors or any value is not positive
    """
    if not anchors:
        raise NavigationError("Scale calibration needs at least one anchor")
    values = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise NavigationError("Anchor depths must be positive")
    factors = values[:, 0] / values[:, 1]
    median = np.median(factors)
    low, high = SCALE_GATE
    inliers = factors[(factors >= low * median) & (factors <= high * median)]
    scale = float(inliers.mean())
    logger.info(f"Calibrated scale {scale:.4f} from {len(inliers)} of {len(factors)} anchors")
    return scale


def scale_path(path: Sequence[GroundPose], scale: float) -> List[GroundPose]:
    return [GroundPose(p.x * scale, p.y * scale, p.theta) for p in path]


# Summaries

def nearest_landmark(position: np.ndarray, instances: Sequence[Instance3D],
                     radius: float = LANDMARK_RADIUS) -> Optional[str]:
    """Category of the nearest categorized instance within radius on the ground plane."""
    best = None
    for inst in sorted(instances, key=lambda i: i.instance_id):
        if inst.category is None:
            continue
        distance = float(np.linalg.norm(inst.centroid[:2] - position))
        if distance <= radius and (best is None or distance < best[0]):
            best = (distance, inst.category)
    return best[1] if best else None


def _turn_phrase(net: float) -> Optional[str]:
    if abs(net) < TURN_BINS_DEG[0]:
        return None
    if abs(net) >= TURN_BACK_DEG:
        return "turn back"
    return "turn left" if net > 0 else "turn right"


def summarize_episode(path: Sequence[GroundPose], actions: ActionSequence,
                      instances: Sequence[Instance3D] = (),
                      landmark_radius: float = LANDMARK_RADIUS) -> List[SummaryEntry]:
    """
    Condense actions into alternating forward and turn entries ending with stop.

    Consecutive turns merge into their net rotation; net turns below the
    smallest bin are dropped and net turns of at least 135 deg read "turn
    back". Each forward run is labelled with the nearest landmark at the
    pose where it ends.
    """
    entries: List[SummaryEntry] = []
    pending_turn = 0.0
    forward_end: Optional[int] = None

    def close_forward():
        nonlocal forward_end
        if forward_end is not None:
            landmark = nearest_landmark(path[forward_end].position, instances, landmark_radius)
            entries.append(SummaryEntry("forward", landmark))
            forward_end = None

    for t in range(len(actions.transitions)):
        for step in actions.transition_steps(t):
            if step.is_turn:
                pending_turn += step.signed_turn
                continue
            phrase = _turn_phrase(pending_turn)
            if phrase is not None:
                close_forward()
                entries.append(SummaryEntry(phrase))
            pending_turn = 0.0
            forward_end = t + 1

    close_forward()
    phrase = _turn_phrase(pending_turn)
    if phrase is not None:
        entries.append(SummaryEntry(phrase))
    entries.append(SummaryEntry("stop"))
    return entries


# Episodes

def build_episodes(scene_id: str, trajectory: Sequence[GroundPose],
                   instances: Sequence[Instance3D] = (),
                   anchors: Sequence[Tuple[float, float]] = (),
                   cluster_radius: float = CLUSTER_RADIUS,
                   split_min_steps: int = SPLIT_MIN_STEPS,
                   max_rotation: float = MAX_STEP_ROTATION,
                   max_translation: float = MAX_STEP_TRANSLATION,
                   lookaround_deviation: float = LOOKAROUND_DEVIATION,
                   landmark_radius: float = LANDMARK_RADIUS) -> List[NavEpisode]:
    """
    Turn one camera trajectory into navigation episodes.

    Order: scale calibration, viewpoint clustering, sub-path splitting,
    look-around removal, step filtering, action encoding, summary.
    Sub-paths left with fewer than two poses are skipped.
    """
    path = list(trajectory)
    if anchors:
        path = scale_path(path, calibrate_scale(anchors))
    if not path:
        logger.warning(f"Scene {scene_id}: empty trajectory, no episodes")
        return []

    viewpoints = cluster_positions(path, cluster_radius)
    episodes = []
    for piece in split_subpaths(viewpoints, split_min_steps, cluster_radius):
        cleaned = remove_lookaround(piece, lookaround_deviation)
        cleaned = filter_steps(cleaned, max_rotation, max_translation)
        if len(cleaned) < 2:
            logger.warning(f"Scene {scene_id}: sub-path collapsed to {len(cleaned)} pose(s), skipped")
            continue
        actions = encode_actions(cleaned)
        episodes.append(NavEpisode(
            episode_id=f"{scene_id}_ep{len(episodes):03d}",
            scene_id=scene_id,
            start=cleaned[0],
            gt_path=cleaned,
            actions=actions,
            summary=summarize_episode(cleaned, actions, instances, landmark_radius),
        ))
    logger.info(f"Scene {scene_id}: built {len(episodes)} episodes from {len(path)} poses")
    return episodes


def episode_statistics(episodes: Sequence[NavEpisode]) -> Dict[str, float]:
    """Mean path length, mean step count and the forward / turn action split."""
    if not episodes:
        return {"episodes": 0, "mean_path_length": 0.0, "mean_steps": 0.0,
                "forward_fraction": 0.0, "turn_fraction": 0.0}
    frame = pd.DataFrame([{
        "path_length": path_length(ep.gt_path),
        "steps": sum(1 for s in ep.actions if s.kind != ActionKind.STOP),
        "forward": sum(1 for s in ep.actions if s.kind == ActionKind.FORWARD),
        "turn": sum(1 for s in ep.actions if s.is_turn),
    } for ep in episodes])
    moves = frame["forward"].sum() + frame["turn"].sum()
    return {
        "episodes": int(len(frame)),
        "mean_path_length": float(frame["path_length"].mean()),
        "mean_steps": float(frame["steps"].mean()),
        "forward_fraction": float(frame["forward"].sum() / moves) if moves else 0.0,
        "turn_fraction": float(frame["turn"].sum() / moves) if moves else 0.0,
    }
