"""
Spatial question-answer generation from scene graphs and navigation episodes,
plus MCA / NA evaluation.
"""

import math
import logging
import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ERROR_MESSAGES, MIN_MARGIN_M, DIRECTION_DEADZONE_DEG, MRA_THRESHOLDS, TASK_CAPS
from exceptions import QuestionGenerationError, MetricError, SceneEngineError
from geometry import wrap_degrees
from navigation import NavEpisode
from scene_graph import CategoryIndex, SceneGraph, closest_distance, longest_dimension_cm, room_size

logger = logging.getLogger(__name__)

TASKS = ("object_count", "relative_distance", "relative_direction", "object_size",
         "absolute_distance", "room_size", "route_plan")
LETTERS = "ABCD"
DIRECTIONS = ("front", "back", "left", "right")
TURN_ALPHABET = ("turn left", "turn right", "turn back")
BLANK = "[please fill in]"

QUESTION_TEMPLATES = {
    "object_count": "How many {category}(s) are in this room?",
    "relative_distance": ("Measuring from the closest point of each object, which of these objects "
                          "({choices}) is the closest to the {target}?"),
    "relative_direction": ("If I am standing by the {observer} and facing the {facing}, "
                           "is the {query} to my front, back, left, or right?"),
    "object_size": "What is the length of the longest dimension (length, width, or height) of the {category}, measured in centimeters?",
    "absolute_distance": "Measuring from the closest point of each object, what is the distance between the {a} and the {b} (in meters)?",
    "room_size": "What is the size of this room (in square meters)? If multiple rooms are shown, estimate the size of the combined space.",
    "route_plan": ("You are a robot beginning at the start of the route. You want to navigate to the end. "
                   "You will perform the following actions: {route} Fill in the blanks with the correct turns."),
}


def format_number(value: float, decimals: int = 0) -> str:
    """Round half away from zero to a fixed number of decimals."""
    quantum = Decimal(1).scaleb(-decimals)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def item_rng(seed: int, task: str, k: int) -> np.random.Generator:
    """Independent generator per (seed, task, k)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), TASKS.index(task), int(k)]))


@dataclass
class GenConfig:
    """Generation settings shared by every question generator."""
    seed: int = 0
    caps: Dict[str, int] = field(default_factory=lambda: dict(TASK_CAPS))
    min_margin_m: float = MIN_MARGIN_M
    direction_deadzone_deg: float = DIRECTION_DEADZONE_DEG

    def __post_init__(self):
        if self.seed < 0:
            raise QuestionGenerationError("seed must be nonnegative")
        if self.min_margin_m <= 0 or self.direction_deadzone_deg <= 0:
            raise QuestionGenerationError("margin and dead zone must be positive")
        caps = {**TASK_CAPS, **self.caps}
        if any(v <= 0 for v in caps.values()):
            raise QuestionGenerationError("task caps must be positive")
        self.caps = caps


@dataclass
class QaItem:
    """One question with its answer and the provenance needed to recompute it."""
    id: str
    scene_id: str
    task: str
    format: str
    question: str
    answer: str
    options: Optional[List[Tuple[str, str]]] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise QuestionGenerationError(f"Unknown task '{self.task}'")
        if self.format == "MCA":
            if not self.options or len(self.options) not in (3, 4):
                raise QuestionGenerationError(f"{self.id}: MCA items need 3 or 4 options")
            texts = [text for _, text in self.options]
            if len(set(texts)) != len(texts):
                raise QuestionGenerationError(f"{self.id}: options must be distinct")
            if sum(1 for letter, _ in self.options if letter == self.answer) != 1:
                raise QuestionGenerationError(f"{self.id}: answer must name exactly one option")
        elif self.format == "NA":
            if not _is_number(self.answer):
                raise QuestionGenerationError(f"{self.id}: numeric answer expected, got '{self.answer}'")
        else:
            raise QuestionGenerationError(f"Unknown answer format '{self.format}'")

    def option_letter(self, text: str) -> str:
        for letter, option in self.options or []:
            if option == text:
                return letter
        raise QuestionGenerationError(f"{self.id}: no option reads '{text}'")

    def to_dict(self) -> Dict[str, Any]:
        record = {"id": self.id, "scene_id": self.scene_id, "task": self.task,
                  "format": self.format, "question": self.question}
        if self.format == "MCA":
            record["options"] = [[letter, text] for letter, text in self.options]
        record["answer"] = self.answer
        record["provenance"] = self.provenance
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QaItem":
        try:
            options = data.get("options")
            return cls(id=data["id"], scene_id=data["scene_id"], task=data["task"],
                       format=data["format"], question=data["question"], answer=str(data["answer"]),
                       options=[(l, t) for l, t in options] if options else None,
                       provenance=data.get("provenance", {}))
        except (KeyError, TypeError, ValueError) as e:
            raise QuestionGenerationError(f"Invalid QA record: {e}")


@dataclass
class GenerationContext:
    scene_id: str
    graph: SceneGraph
    episodes: Sequence[NavEpisode] = ()
    cfg: GenConfig = field(default_factory=GenConfig)
    index: CategoryIndex = field(init=False)

    def __post_init__(self):
        self.index = CategoryIndex.from_nodes(self.graph.nodes)

    def unique_node_ids(self) -> List[int]:
        return sorted(self.index.unique_nodes().values())

    def label(self, node_id: int) -> str:
        return self.graph.node(node_id).category


def _lettered(texts: Sequence[str]) -> List[Tuple[str, str]]:
    return list(zip(LETTERS, texts))


class QuestionGenerator(ABC):
    """Abstract base class for one question task."""

    task: str = ""
    answer_format: str = "NA"

    @abstractmethod
    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        """Generate up to the task cap of items for one scene."""
        pass

    @abstractmethod
    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        """Re-derive an item's answer from its provenance."""
        pass

    def cap(self, ctx: GenerationContext) -> int:
        return ctx.cfg.caps[self.task]

    def make_item(self, ctx: GenerationContext, k: int, question: str, answer: str,
                  provenance: Dict[str, Any], options: Optional[List[Tuple[str, str]]] = None) -> QaItem:
        return QaItem(id=f"{ctx.scene_id}_{self.task}_{k:03d}", scene_id=ctx.scene_id, task=self.task,
                      format=self.answer_format, question=question, answer=answer,
                      options=options, provenance=provenance)


class ObjectCountGenerator(QuestionGenerator):
    """Counts of categories with more than one instance."""

    task = "object_count"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        items = []
        for category in ctx.index.repeated_categories()[:self.cap(ctx)]:
            items.append(self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(category=category),
                str(ctx.index.count(category)),
                {"category": category, "node_ids": ctx.index.ids_by_category[category]},
            ))
        return items

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        return str(ctx.index.count(item.provenance["category"]))


class RelativeDistanceGenerator(QuestionGenerator):
    """Which of four unique objects is closest to a unique target object."""

    task = "relative_distance"
    answer_format = "MCA"
    num_candidates = 4

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        unique = ctx.unique_node_ids()
        if len(unique) < self.num_candidates + 1:
            return []
        items = []
        for k, target_id in enumerate(unique):
            if len(items) >= self.cap(ctx):
                break
            rng = item_rng(ctx.cfg.seed, self.task, k)
            others = [i for i in unique if i != target_id]
            candidates = [int(c) for c in rng.choice(others, size=self.num_candidates, replace=False)]
            target = ctx.graph.node(target_id)
            distances = sorted(closest_distance(target, ctx.graph.node(c)) for c in candidates)
            if distances[1] - distances[0] < ctx.cfg.min_margin_m:
                logger.debug(f"{ctx.scene_id}: ambiguous relative distance for node {target_id}, skipped")
                continue
            order = [candidates[i] for i in rng.permutation(len(candidates))]
            options = _lettered([ctx.label(c) for c in order])
            items.append(self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(
                    choices=", ".join(text for _, text in options), target=target.category),
                self._closest_letter(target_id, order, ctx),
                {"target": target_id, "candidates": order},
                options,
            ))
        return items

    def _closest_letter(self, target_id: int, order: Sequence[int], ctx: GenerationContext) -> str:
        target = ctx.graph.node(target_id)
        distances = [closest_distance(target, ctx.graph.node(c)) for c in order]
        return LETTERS[int(np.argmin(distances))]

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        return self._closest_letter(item.provenance["target"], item.provenance["candidates"], ctx)


def classify_direction(angle: float) -> str:
    """Quadrant of a bearing relative to the facing direction (degrees, left positive)."""
    angle = wrap_degrees(angle)
    if abs(angle) <= 45.0:
        return "front"
    if abs(angle) > 135.0:
        return "back"
    return "left" if angle > 0 else "right"


def _boundary_gap(angle: float) -> float:
    return min(abs(wrap_degrees(angle - b)) for b in (45.0, 135.0, -45.0, -135.0))


def direction_angle(observer: np.ndarray, facing: np.ndarray, query: np.ndarray) -> Optional[float]:
    """Bearing of query relative to the observer->facing direction, None if undefined."""
    ahead = facing[:2] - observer[:2]
    toward = query[:2] - observer[:2]
    if np.linalg.norm(ahead) < 1e-6 or np.linalg.norm(toward) < 1e-6:
        return None
    heading = math.degrees(math.atan2(ahead[1], ahead[0]))
    return wrap_degrees(math.degrees(math.atan2(toward[1], toward[0])) - heading)


class RelativeDirectionGenerator(QuestionGenerator):
    """Direction of a query object for an observer at one object facing another."""

    task = "relative_direction"
    answer_format = "MCA"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        unique = ctx.unique_node_ids()
        if len(unique) < 3:
            return []
        triples = list(itertools.permutations(unique, 3))
        rng = item_rng(ctx.cfg.seed, self.task, 0)
        options = _lettered(DIRECTIONS)
        items = []
        for index in rng.permutation(len(triples)):
            if len(items) >= self.cap(ctx):
                break
            a, b, c = (int(v) for v in triples[index])
            angle = direction_angle(ctx.graph.node(a).centroid, ctx.graph.node(b).centroid,
                                    ctx.graph.node(c).centroid)
            if angle is None or _boundary_gap(angle) < ctx.cfg.direction_deadzone_deg:
                continue
            direction = classify_direction(angle)
            items.append(self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(observer=ctx.label(a), facing=ctx.label(b), query=ctx.label(c)),
                LETTERS[DIRECTIONS.index(direction)],
                {"observer": a, "facing": b, "query": c},
                options,
            ))
        return items

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        p = item.provenance
        angle = direction_angle(ctx.graph.node(p["observer"]).centroid, ctx.graph.node(p["facing"]).centroid,
                                ctx.graph.node(p["query"]).centroid)
        if angle is None:
            raise QuestionGenerationError(f"{item.id}: direction is undefined")
        return LETTERS[DIRECTIONS.index(classify_direction(angle))]


class ObjectSizeGenerator(QuestionGenerator):
    """Longest dimension of unique objects in centimeters."""

    task = "object_size"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        items = []
        for node_id in ctx.unique_node_ids()[:self.cap(ctx)]:
            node = ctx.graph.node(node_id)
            items.append(self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(category=node.category),
                format_number(longest_dimension_cm(node)),
                {"node": node_id},
            ))
        return items

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        return format_number(longest_dimension_cm(ctx.graph.node(item.provenance["node"])))


class AbsoluteDistanceGenerator(QuestionGenerator):
    """Closest-point distance between two unique objects in meters."""

    task = "absolute_distance"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        pairs = list(itertools.combinations(ctx.unique_node_ids(), 2))
        if not pairs:
            return []
        rng = item_rng(ctx.cfg.seed, self.task, 0)
        items = []
        for index in rng.permutation(len(pairs))[:self.cap(ctx)]:
            a, b = (int(v) for v in pairs[index])
            items.append(self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(a=ctx.label(a), b=ctx.label(b)),
                format_number(closest_distance(ctx.graph.node(a), ctx.graph.node(b)), 1),
                {"a": a, "b": b},
            ))
        return items

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        p = item.provenance
        return format_number(closest_distance(ctx.graph.node(p["a"]), ctx.graph.node(p["b"])), 1)


class RoomSizeGenerator(QuestionGenerator):
    """Floor area from the room's x-y extents."""

    task = "room_size"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        try:
            area = room_size(ctx.graph)
        except SceneEngineError as e:
            logger.warning(f"{ctx.scene_id}: no room size question ({e.message})")
            return []
        return [self.make_item(ctx, 0, QUESTION_TEMPLATES[self.task], format_number(area, 1),
                               {"room_extent": list(ctx.graph.room_extent)})]

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        return format_number(room_size(ctx.graph), 1)


def route_text(episode: NavEpisode) -> str:
    """Route description with every turn masked as a blank."""
    parts = []
    for entry in episode.summary:
        if entry.action == "forward":
            parts.append(f"Go forward until the {entry.landmark}." if entry.landmark else "Go forward.")
        elif entry.action == "stop":
            parts.append("Stop.")
        else:
            parts.append(f"{BLANK}.")
    return " ".join(parts)


class RoutePlanGenerator(QuestionGenerator):
    """Fill the masked turns of a navigation episode summary."""

    task = "route_plan"
    answer_format = "MCA"

    def generate(self, ctx: GenerationContext) -> List[QaItem]:
        items = []
        for k, episode in enumerate(sorted(ctx.episodes, key=lambda e: e.episode_id)):
            if len(items) >= self.cap(ctx):
                break
            turns = episode.turns
            if not turns:
                logger.debug(f"{episode.episode_id}: no turns, no route question")
                continue
            rng = item_rng(ctx.cfg.seed, self.task, k)
            correct = ", ".join(turns)
            n_options = 3 if len(turns) == 1 else 4
            pool = [", ".join(seq) for seq in itertools.product(TURN_ALPHABET, repeat=len(turns))
                    if ", ".join(seq) != correct]
            if len(pool) > 5000:
                pool = self._sample_pool(rng, len(turns), correct)
            picks = rng.choice(len(pool), size=n_options - 1, replace=False)
            texts = [correct] + [pool[int(i)] for i in picks]
            texts = [texts[int(i)] for i in rng.permutation(len(texts))]
            options = _lettered(texts)
            item = self.make_item(
                ctx, len(items),
                QUESTION_TEMPLATES[self.task].format(route=route_text(episode)),
                options[texts.index(correct)][0],
                {"episode_id": episode.episode_id, "turns": turns},
                options,
            )
            items.append(item)
        return items

    @staticmethod
    def _sample_pool(rng: np.random.Generator, length: int, correct: str) -> List[str]:
        pool: List[str] = []
        while len(pool) < 8:
            text = ", ".join(TURN_ALPHABET[int(i)] for i in rng.integers(0, len(TURN_ALPHABET), size=length))
            if text != correct and text not in pool:
                pool.append(text)
        return pool

    def recompute(self, item: QaItem, ctx: GenerationContext) -> str:
        episode_id = item.provenance["episode_id"]
        for episode in ctx.episodes:
            if episode.episode_id == episode_id:
                return item.option_letter(", ".join(episode.turns))
        raise QuestionGenerationError(f"{item.id}: episode {episode_id} not found")


class VqaEngine:
    """Main generation engine that coordinates the per-task generators."""

    def __init__(self):
        """Initialize the engine with one generator per task."""
        self.generators: Dict[str, QuestionGenerator] = {
            "object_count": ObjectCountGenerator(),
            "relative_distance": RelativeDistanceGenerator(),
            "relative_direction": RelativeDirectionGenerator(),
            "object_size": ObjectSizeGenerator(),
            "absolute_distance": AbsoluteDistanceGenerator(),
            "room_size": RoomSizeGenerator(),
            "route_plan": RoutePlanGenerator(),
        }

    def generate(self, scene_id: str, graph: SceneGraph, episodes: Sequence[NavEpisode] = (),
                 cfg: Optional[GenConfig] = None, tasks: Sequence[str] = TASKS) -> List[QaItem]:
        """
        Generate questions of every requested task for one scene.

        Args:
            scene_id: Scene identifier used in item ids
            graph: Scene graph with instance points
            episodes: Navigation episodes of the scene (route planning)
            cfg: Generation settings; defaults when omitted
            tasks: Subset of tasks to generate

        Returns:
            Items in task order, deterministic for a given seed

        Raises:
            QuestionGenerationError: If generation fails
        """
        ctx = GenerationContext(scene_id=scene_id, graph=graph, episodes=episodes, cfg=cfg or GenConfig())
        items: List[QaItem] = []
        for task in tasks:
            if task not in self.generators:
                raise QuestionGenerationError(f"Unknown task '{task}'")
            try:
                generated = self.generators[task].generate(ctx)
            except SceneEngineError:
                raise
            except Exception as e:
                logger.error(f"Unexpected error generating {task} questions: {e}")
                raise QuestionGenerationError(ERROR_MESSAGES["stage_error"].format(stage=f"gen-vqa/{task}"))
            logger.info(f"{scene_id}: generated {len(generated)} {task} questions")
            items.extend(generated)
        return items

    def recompute(self, item: QaItem, graph: SceneGraph, episodes: Sequence[NavEpisode] = (),
                  cfg: Optional[GenConfig] = None) -> str:
        ctx = GenerationContext(scene_id=item.scene_id, graph=graph, episodes=episodes, cfg=cfg or GenConfig())
        return self.generators[item.task].recompute(item, ctx)


def recompute_answer(item: QaItem, graph: SceneGraph, episodes: Sequence[NavEpisode] = ()) -> str:
    """Re-derive an item's answer from its provenance record."""
    return VqaEngine().recompute(item, graph, episodes)


# Evaluation

def eval_mca(predictions: Mapping[str, str], items: Sequence[QaItem]) -> float:
    """Mean accuracy of letter predictions over MCA items; missing predictions count as wrong."""
    mca = [item for item in items if item.format == "MCA"]
    if not mca:
        raise MetricError("No multiple-choice items to evaluate")
    correct = sum(1 for item in mca if str(predictions.get(item.id, "")).strip().upper() == item.answer)
    return correct / len(mca)


def eval_na_mra(predictions: Sequence[float], answers: Sequence[float],
                thresholds: Sequence[float] = MRA_THRESHOLDS) -> float:
    """
    Mean relative accuracy over confidence thresholds.

    An item passes threshold t when |pred - gt| / gt < 1 - t. Items with a
    nonpositive ground truth are excluded.

    Raises:
        MetricError: If the inputs differ in length or no item is usable
    """
    if len(predictions) != len(answers):
        raise MetricError("Predictions and answers differ in length")
    scores = []
    for pred, gt in zip(predictions, answers):
        gt = float(gt)
        if gt <= 0:
            logger.warning(f"Excluding numeric item with nonpositive ground truth {gt}")
            continue
        relative = abs(float(pred) - gt) / gt
        scores.append(np.mean([relative < 1.0 - t for t in thresholds]))
    if not scores:
        raise MetricError("No numeric items with positive ground truth")
    return float(np.mean(scores))


def evaluate_predictions(predictions: Mapping[str, Any], items: Sequence[QaItem]) -> Dict[str, Any]:
    """Per-task scores: accuracy for MCA tasks, MRA for NA tasks."""
    report: Dict[str, Any] = {}
    for task in TASKS:
        task_items = [item for item in items if item.task == task]
        if not task_items:
            continue
        if task_items[0].format == "MCA":
            report[task] = {"format": "MCA", "count": len(task_items),
                            "score": eval_mca(predictions, task_items)}
            continue
        usable = {item.id for item in task_items if _is_number(predictions.get(item.id))}
        if len(usable) < len(task_items):
            logger.warning(f"{task}: {len(task_items) - len(usable)} items lack a numeric prediction")
        preds = [float(predictions[item.id]) if item.id in usable else math.inf for item in task_items]
        report[task] = {"format": "NA", "count": len(task_items),
                        "score": eval_na_mra(preds, [float(item.answer) for item in task_items])}
    if not report:
        raise MetricError("No question items to evaluate")
    report["overall"] = float(np.mean([entry["score"] for entry in report.values()]))
    return report


def _is_number(value: Any) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


def qa_statistics(items: Sequence[QaItem]) -> Dict[str, Any]:
    """Item counts per task and per answer format."""
    if not items:
        return {"total": 0, "by_task": {}, "by_format": {}}
    frame = pd.DataFrame([{"task": item.task, "format": item.format} for item in items])
    by_task = frame.groupby("task").size()
    by_format = frame.groupby("format").size()
    return {
        "total": int(len(frame)),
        "by_task": {task: int(by_task[task]) for task in TASKS if task in by_task.index},
        "by_format": {fmt: int(n) for fmt, n in by_format.items()},
    }
