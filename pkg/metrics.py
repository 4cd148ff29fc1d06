"""
Evaluation metrics: navigation success metrics and box-matching detection metrics.
"""

import logging
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import SUCCESS_RADIUS
from exceptions import MetricError
from geometry import Aabb, GroundPose

logger = logging.getLogger(__name__)


def path_length(path: Sequence[GroundPose]) -> float:
    """Sum of consecutive planar distances in meters."""
    return float(sum(a.distance_to(b) for a, b in zip(path, path[1:])))


@dataclass
class EpisodeResult:
    """Executed path of one episode with its goal and shortest path length."""
    executed_path: List[GroundPose]
    goal: Tuple[float, float]
    shortest_path_length: float
    episode_id: str = ""

    def __post_init__(self):
        if not self.executed_path:
            raise MetricError(f"Episode {self.episode_id}: executed path is empty")
        if self.shortest_path_length <= 0:
            raise MetricError(f"Episode {self.episode_id}: shortest path length must be positive")

    def goal_distances(self) -> np.ndarray:
        positions = np.array([p.position for p in self.executed_path])
        return np.linalg.norm(positions - np.asarray(self.goal, dtype=np.float64), axis=1)


@dataclass
class NavMetrics:
    SR: float
    OS: float
    SPL: float
    Dist: float
    PL: float
    episodes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def nav_metrics(results: Sequence[EpisodeResult], success_radius: float = SUCCESS_RADIUS) -> NavMetrics:
    """
    Success rate, oracle success, SPL, final distance to goal and path length.

    Raises:
        MetricError: If there are no results
    """
    if not results:
        raise MetricError("Navigation metrics need at least one episode")
    rows = []
    for result in results:
        distances = result.goal_distances()
        executed = path_length(result.executed_path)
        success = float(distances[-1] <= success_radius)
        shortest = result.shortest_path_length
        rows.append({
            "dist": float(distances[-1]),
            "success": success,
            "oracle": float(distances.min() <= success_radius),
            "spl": success * shortest / max(executed, shortest),
            "pl": executed,
        })
    frame = pd.DataFrame(rows)
    metrics = NavMetrics(SR=float(frame["success"].mean()), OS=float(frame["oracle"].mean()),
                         SPL=float(frame["spl"].mean()), Dist=float(frame["dist"].mean()),
                         PL=float(frame["pl"].mean()), episodes=len(frame))
    logger.info(f"Navigation metrics over {len(frame)} episodes: SR={metrics.SR:.3f} SPL={metrics.SPL:.3f}")
    return metrics


def aabb_iou(a: Aabb, b: Aabb) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    overlap = a.intersection(b)
    if overlap is None:
        return 0.0
    inter = overlap.volume()
    union = a.volume() + b.volume() - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass
class Detection:
    aabb: Aabb
    category: str
    confidence: Optional[float] = None
    scene_id: str = ""

    @property
    def group(self) -> Tuple[str, str]:
        return self.scene_id, self.category

    def to_dict(self) -> Dict[str, Any]:
        return {"scene_id": self.scene_id, "category": self.category,
                "aabb": self.aabb.to_dict(), "confidence": self.confidence}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Detection":
        try:
            confidence = data.get("confidence")
            return cls(aabb=Aabb.from_dict(data["aabb"]), category=str(data["category"]),
                       confidence=None if confidence is None else float(confidence),
                       scene_id=str(data.get("scene_id", "")))
        except (KeyError, TypeError, ValueError) as e:
            raise MetricError(f"Invalid detection record: {e}")


@dataclass
class DetectionSet:
    boxes: List[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def categories(self) -> List[str]:
        return sorted({d.category for d in self.boxes})


def _greedy_matches(pred: Sequence[Detection], gt: Sequence[Detection], iou_threshold: float) -> int:
    """One-to-one matches within (scene, category) by descending IoU, ties to the lower gt index."""
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if p.group != g.group:
                continue
            iou = aabb_iou(p.aabb, g.aabb)
            if iou >= iou_threshold:
                candidates.append((-iou, j, i))
    candidates.sort()
    used_pred, used_gt = set(), set()
    for _, j, i in candidates:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
    return len(used_gt)


def f1_at_iou(pred: DetectionSet, gt: DetectionSet, iou_threshold: float) -> float:
    """F1 of greedy category-aware matching at an IoU threshold."""
    if not len(pred) or not len(gt):
        return 0.0
    tp = _greedy_matches(pred.boxes, gt.boxes, iou_threshold)
    return 2.0 * tp / (len(pred) + len(gt))


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def average_precision(pred: DetectionSet, gt: DetectionSet, iou_threshold: float) -> float:
    """
    Mean over ground-truth categories of all-point interpolated AP.

    Predictions are swept by descending confidence; each takes the
    best-overlapping unmatched ground truth of its scene and category.

    Raises:
        MetricError: If a prediction has no confidence
    """
    if any(d.confidence is None for d in pred.boxes):
        raise MetricError("Average precision needs a confidence on every prediction")
    if not len(gt):
        logger.warning("No ground truth boxes; average precision is 0")
        return 0.0

    per_category = []
    for category in gt.categories():
        gts = [g for g in gt.boxes if g.category == category]
        preds = sorted((p for p in pred.boxes if p.category == category),
                       key=lambda p: -p.confidence)
        matched = set()
        tp = np.zeros(len(preds))
        for i, p in enumerate(preds):
            best, best_iou = None, iou_threshold
            for j, g in enumerate(gts):
                if j in matched or g.scene_id != p.scene_id:
                    continue
                iou = aabb_iou(p.aabb, g.aabb)
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = j, iou
            if best is not None:
                matched.add(best)
                tp[i] = 1.0
        per_category.append(_interpolated_ap(tp, len(gts)))
    return float(np.mean(per_category))


def detection_report(pred: DetectionSet, gt: DetectionSet,
                     iou_thresholds: Sequence[float] = (0.25, 0.5)) -> Dict[str, float]:
    """F1 and AP at each IoU threshold, keyed like F1@0.25 / AP@0.25."""
    report: Dict[str, float] = {}
    has_confidence = len(pred) > 0 and all(d.confidence is not None for d in pred.boxes)
    for threshold in iou_thresholds:
        report[f"F1@{threshold:g}"] = f1_at_iou(pred, gt, threshold)
        if has_confidence or not len(pred):
            report[f"AP@{threshold:g}"] = average_precision(pred, gt, threshold)
    return report


def format_report(metrics: Dict[str, Any], title: str = "metric") -> str:
    """Plain-text two-column table of scalar metrics."""
    rows = [(name, value) for name, value in metrics.items() if isinstance(value, (int, float))]
    frame = pd.DataFrame(rows, columns=[title, "value"])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n"
