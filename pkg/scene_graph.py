"""
3D scene graphs over lifted instances and the spatial facts derived from them.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from sklearn.neighbors import NearestNeighbors

from config import VERTICAL_EPSILON, NEAR_THRESHOLD
from exceptions import SceneGraphError
from geometry import GroundPose, Aabb
from instance_lifter import Instance3D

logger = logging.getLogger(__name__)


class Relation(str, Enum):
    LEFT_OF = "left-of"
    RIGHT_OF = "right-of"
    IN_FRONT_OF = "in-front-of"
    BEHIND = "behind"
    ABOVE = "above"
    BELOW = "below"
    NEAR = "near"


@dataclass(frozen=True)
class Edge:
    a: int
    b: int
    relation: Relation

    def to_dict(self) -> Dict[str, Any]:
        return {"a": self.a, "b": self.b, "relation": self.relation.value}


@dataclass
class SceneGraph:
    """Instances as nodes with stored vertical and proximity edges."""
    nodes: List[Instance3D] = field(default_factory=list)
    edges: List[Edge] = field(default_factory=list)
    room_extent: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        ids = [n.instance_id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise SceneGraphError("Scene graph node ids must be unique")
        if any(e.a == e.b for e in self.edges):
            raise SceneGraphError("Scene graph must not contain self-edges")
        self._by_id = {n.instance_id: n for n in self.nodes}

    def node(self, instance_id: int) -> Instance3D:
        try:
            return self._by_id[instance_id]
        except KeyError:
            raise SceneGraphError(f"Unknown node id {instance_id}")

    def edges_of(self, relation: Relation) -> List[Edge]:
        return [e for e in self.edges if e.relation == relation]

    def has_edge(self, a: int, b: int, relation: Relation) -> bool:
        return Edge(a, b, relation) in set(self.edges)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "nodes": [
                {"id": n.instance_id, "category": n.category,
                 "centroid": n.centroid.tolist(), "aabb": n.aabb.to_dict()}
                for n in self.nodes
            ],
            "edges": [e.to_dict() for e in self.edges],
            "room_extent": [float(self.room_extent[0]), float(self.room_extent[1])],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], instances: Sequence[Instance3D]) -> "SceneGraph":
        """Rebuild a graph from its JSON form and the instances carrying the points."""
        by_id = {inst.instance_id: inst for inst in instances}
        try:
            nodes = [by_id[int(n["id"])] for n in data["nodes"]]
            edges = [Edge(int(e["a"]), int(e["b"]), Relation(e["relation"])) for e in data["edges"]]
            extent = tuple(float(v) for v in data["room_extent"])
        except (KeyError, ValueError) as e:
            raise SceneGraphError(f"Invalid scene graph record: {e}")
        return cls(nodes=nodes, edges=edges, room_extent=extent)


@dataclass
class CategoryIndex:
    """Node ids per category; uncategorized nodes are left out."""
    ids_by_category: Dict[str, List[int]] = field(default_factory=dict)

    @classmethod
    def from_nodes(cls, nodes: Sequence[Instance3D]) -> "CategoryIndex":
        index: Dict[str, List[int]] = {}
        for node in sorted(nodes, key=lambda n: n.instance_id):
            if node.category is not None:
                index.setdefault(node.category, []).append(node.instance_id)
        return cls(ids_by_category=dict(sorted(index.items())))

    def count(self, category: str) -> int:
        return len(self.ids_by_category.get(category, []))

    def unique_nodes(self) -> Dict[str, int]:
        """Categories with exactly one node, mapped to that node id."""
        return {c: ids[0] for c, ids in self.ids_by_category.items() if len(ids) == 1}

    def repeated_categories(self) -> List[str]:
        return [c for c, ids in self.ids_by_category.items() if len(ids) > 1]


def closest_distance(a: Instance3D, b: Instance3D) -> float:
    """Minimum distance between the stored points of two instances."""
    query, reference = (a.points, b.points) if len(a.points) <= len(b.points) else (b.points, a.points)
    distances, _ = NearestNeighbors(n_neighbors=1).fit(reference).kneighbors(query)
    return float(distances.min())


def _footprints_overlap(a: Aabb, b: Aabb) -> bool:
    return bool(np.all(a.min[:2] <= b.max[:2]) and np.all(b.min[:2] <= a.max[:2]))


def is_above(a: Instance3D, b: Instance3D, vertical_epsilon: float = VERTICAL_EPSILON) -> bool:
    """a rests over b: a's bottom reaches b's top within epsilon over overlapping footprints."""
    return (a.aabb.min[2] >= b.aabb.max[2] - vertical_epsilon
            and _footprints_overlap(a.aabb, b.aabb)
            and a.centroid[2] > b.centroid[2])


def horizontal_relations(target: Sequence[float], observer: GroundPose) -> Set[Relation]:
    """
    Quadrant of a target point in the observer's ground frame.

    Forward is the observer heading, left is heading + 90 deg. A target
    exactly on an axis gets no relation along that axis.
    """
    heading = np.radians(observer.theta)
    offset = np.asarray(target, dtype=np.float64)[:2] - observer.position
    forward = offset[0] * np.cos(heading) + offset[1] * np.sin(heading)
    left = -offset[0] * np.sin(heading) + offset[1] * np.cos(heading)

    relations = set()
    if forward > 0:
        relations.add(Relation.IN_FRONT_OF)
    elif forward < 0:
        relations.add(Relation.BEHIND)
    if left > 0:
        relations.add(Relation.LEFT_OF)
    elif left < 0:
        relations.add(Relation.RIGHT_OF)
    return relations


def pairwise_relations(a: Instance3D, b: Instance3D, observer: Optional[GroundPose] = None,
                       vertical_epsilon: float = VERTICAL_EPSILON,
                       near_threshold: float = NEAR_THRESHOLD) -> Set[Relation]:
    """
    Relations between two instances.

    Vertical relations read "a above b" / "a below b". Horizontal relations
    place b relative to a in the observer's heading and are only computed
    when an observer is given. They are anchored at a's centroid; the
    observer only contributes its heading, never its position.
    """
    if a.instance_id == b.instance_id:
        raise SceneGraphError("Relations need two distinct instances")

    relations: Set[Relation] = set()
    if is_above(a, b, vertical_epsilon):
        relations.add(Relation.ABOVE)
    elif is_above(b, a, vertical_epsilon):
        relations.add(Relation.BELOW)
    if closest_distance(a, b) <= near_threshold:
        relations.add(Relation.NEAR)
    if observer is not None:
        anchor = GroundPose(x=a.centroid[0], y=a.centroid[1], theta=observer.theta)
        relations |= horizontal_relations(b.centroid, anchor)
    return relations


def _extent_of_points(points: np.ndarray) -> Tuple[float, float]:
    span = points[:, :2].max(axis=0) - points[:, :2].min(axis=0)
    return float(span[0]), float(span[1])


def build_graph(instances: Sequence[Instance3D], scene_points: Optional[np.ndarray] = None,
                vertical_epsilon: float = VERTICAL_EPSILON,
                near_threshold: float = NEAR_THRESHOLD) -> SceneGraph:
    """
    Compute vertical and proximity edges over all instance pairs.

    The room extent comes from `scene_points` (e.g. the reconstructed mesh)
    when given, otherwise from the union of instance bounding boxes.
    """
    nodes = sorted(instances, key=lambda n: n.instance_id)
    edges: List[Edge] = []
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            relations = pairwise_relations(a, b, None, vertical_epsilon, near_threshold)
            if Relation.ABOVE in relations:
                edges += [Edge(a.instance_id, b.instance_id, Relation.ABOVE),
                          Edge(b.instance_id, a.instance_id, Relation.BELOW)]
            elif Relation.BELOW in relations:
                edges += [Edge(b.instance_id, a.instance_id, Relation.ABOVE),
                          Edge(a.instance_id, b.instance_id, Relation.BELOW)]
            if Relation.NEAR in relations:
                edges.append(Edge(a.instance_id, b.instance_id, Relation.NEAR))

    if scene_points is not None and len(scene_points):
        extent = _extent_of_points(np.asarray(scene_points, dtype=np.float64).reshape(-1, 3))
    elif nodes:
        corners = np.vstack([np.vstack([n.aabb.min, n.aabb.max]) for n in nodes])
        extent = _extent_of_points(corners)
    else:
        extent = (0.0, 0.0)

    logger.info(f"Built scene graph with {len(nodes)} nodes and {len(edges)} edges")
    return SceneGraph(nodes=nodes, edges=edges, room_extent=extent)


def room_size(source: Union[SceneGraph, np.ndarray]) -> float:
    """
    Floor area approximated as the product of the x and y extents.

    Raises:
        SceneGraphError: If the scene is empty
    """
    if isinstance(source, SceneGraph):
        if not source.nodes and source.room_extent == (0.0, 0.0):
            raise SceneGraphError("Room size of an empty scene is undefined")
        x_len, y_len = source.room_extent
        return float(x_len * y_len)
    points = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise SceneGraphError("Room size of an empty scene is undefined")
    x_len, y_len = _extent_of_points(points)
    return x_len * y_len


def longest_dimension_cm(instance: Instance3D) -> float:
    return float(100.0 * instance.aabb.extent.max())
