"""Scene graphs: parsing, validation, canonical serialization and edits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

N_MAX = 8
_BOX_TOL = 1e-9


class SceneGraphError(ValueError):
    pass


class GraphParseError(SceneGraphError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class VocabularyError(SceneGraphError):
    pass


class DanglingReferenceError(SceneGraphError):
    pass


class ConstraintError(SceneGraphError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Object categories, edge predicates and attributes of one dataset.

    ``exclusive_groups`` lists attribute sets of which a node holds at most
    one (colors, for instance); ``set_attribute`` replaces within a group.
    """

    categories: tuple[str, ...]
    predicates: tuple[str, ...]
    attributes: tuple[str, ...] = ()
    exclusive_groups: tuple[tuple[str, ...], ...] = ()

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Vocabulary":
        try:
            return cls(
                categories=tuple(manifest["object_categories"]),
                predicates=tuple(manifest["predicates"]),
                attributes=tuple(manifest.get("attributes", ())),
                exclusive_groups=tuple(tuple(g) for g in manifest.get("exclusive_attribute_groups", ())),
            )
        except KeyError as exc:
            raise VocabularyError(f"manifest lacks {exc.args[0]!r}") from None

    def to_manifest(self) -> dict:
        return {
            "object_categories": list(self.categories),
            "predicates": list(self.predicates),
            "attributes": list(self.attributes),
            "exclusive_attribute_groups": [list(g) for g in self.exclusive_groups],
        }

    def group_of(self, attribute: str) -> tuple[str, ...] | None:
        for g in self.exclusive_groups:
            if attribute in g:
                return g
        return None


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        x, y, w, h = self.x, self.y, self.w, self.h
        if not (w > 0 and h > 0 and x >= -_BOX_TOL and y >= -_BOX_TOL
                and x + w <= 1 + _BOX_TOL and y + h <= 1 + _BOX_TOL and w <= 1 and h <= 1):
            raise ConstraintError(f"invalid box {(x, y, w, h)}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)


@dataclass(frozen=True)
class Node:
    id: str
    category: str
    attributes: tuple[str, ...] = ()
    bbox: BoundingBox | None = None


@dataclass(frozen=True)
class Edge:
    subject: str
    predicate: str
    object: str


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def n_objects(self) -> int:
        return len(self.nodes)

    def index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise DanglingReferenceError(f"no node {node_id!r}")

    @property
    def has_boxes(self) -> bool:
        return all(n.bbox is not None for n in self.nodes)

    def boxes(self) -> list[tuple[float, float, float, float]]:
        if not self.has_boxes:
            raise ConstraintError("graph has nodes without bbox")
        return [n.bbox.as_tuple() for n in self.nodes]

    def with_boxes(self, boxes: Sequence[Sequence[float]]) -> "SceneGraph":
        if len(boxes) != len(self.nodes):
            raise ConstraintError("one box per node required")
        nodes = tuple(replace(n, bbox=BoundingBox(*map(float, b))) for n, b in zip(self.nodes, boxes))
        return SceneGraph(nodes, self.edges)


def validate(g: SceneGraph, vocab: Vocabulary | None = None, n_max: int = N_MAX) -> SceneGraph:
    if not 1 <= len(g.nodes) <= n_max:
        raise ConstraintError(f"graph must have 1..{n_max} nodes, got {len(g.nodes)}")
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        raise ConstraintError("node ids must be unique")
    known = set(ids)
    for n in g.nodes:
        if vocab is not None and n.category not in vocab.categories:
            raise VocabularyError(f"unknown category {n.category!r}")
    for e in g.edges:
        if vocab is not None and e.predicate not in vocab.predicates:
            raise VocabularyError(f"unknown predicate {e.predicate!r}")
        for ref in (e.subject, e.object):
            if ref not in known:
                raise DanglingReferenceError(f"edge references unknown node {ref!r}")
        if e.subject == e.object:
            raise ConstraintError(f"self-loop on {e.subject!r}")
    return g


_NODE_KEYS = {"id", "category", "attributes", "bbox"}
_EDGE_KEYS = {"subject", "predicate", "object"}


def _require_str(value, what: str) -> str:
    if not isinstance(value, str):
        raise GraphParseError(f"{what} must be a string")
    return value


def from_dict(doc, vocab: Vocabulary | None = None, n_max: int = N_MAX) -> SceneGraph:
    if not isinstance(doc, dict):
        raise GraphParseError("top level must be an object")
    extra = set(doc) - {"nodes", "edges"}
    if extra:
        raise GraphParseError(f"unknown keys {sorted(extra)}")
    if not isinstance(doc.get("nodes"), list) or not isinstance(doc.get("edges", []), list):
        raise GraphParseError("'nodes' and 'edges' must be arrays")
    nodes = []
    for raw in doc["nodes"]:
        if not isinstance(raw, dict):
            raise GraphParseError("node must be an object")
        if set(raw) - _NODE_KEYS:
            raise GraphParseError(f"unknown node keys {sorted(set(raw) - _NODE_KEYS)}")
        if "id" not in raw or "category" not in raw:
            raise GraphParseError("node needs 'id' and 'category'")
        attrs = raw.get("attributes", [])
        if not isinstance(attrs, list):
            raise GraphParseError("'attributes' must be an array")
        box = raw.get("bbox")
        if box is not None:
            if not (isinstance(box, list) and len(box) == 4
                    and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)):
                raise GraphParseError("'bbox' must be [x, y, w, h]")
            box = BoundingBox(*map(float, box))
        nodes.append(Node(_require_str(raw["id"], "id"), _require_str(raw["category"], "category"),
                          tuple(_require_str(a, "attribute") for a in attrs), box))
    edges = []
    for raw in doc.get("edges", []):
        if not isinstance(raw, dict) or set(raw) != _EDGE_KEYS:
            raise GraphParseError("edge must have exactly subject, predicate, object")
        edges.append(Edge(*(_require_str(raw[k], k) for k in ("subject", "predicate", "object"))))
    return validate(SceneGraph(tuple(nodes), tuple(edges)), vocab, n_max)


def parse_scene_graph(text: bytes | str, vocab: Vocabulary | None = None, n_max: int = N_MAX) -> SceneGraph:
    """Parse the JSON scene-graph format; node order follows the file."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphParseError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(exc.msg, exc.lineno) from None
    return from_dict(doc, vocab, n_max)


def to_dict(g: SceneGraph) -> dict:
    nodes = []
    for n in g.nodes:
        d = {"id": n.id, "category": n.category}
        if n.attributes:
            d["attributes"] = list(n.attributes)
        if n.bbox is not None:
            d["bbox"] = list(n.bbox.as_tuple())
        nodes.append(d)
    edges = [{"subject": e.subject, "predicate": e.predicate, "object": e.object} for e in g.edges]
    return {"nodes": nodes, "edges": edges}


def serialize(g: SceneGraph) -> bytes:
    return json.dumps(to_dict(g), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_triples(g: SceneGraph) -> list[tuple[int, int, int]]:
    """(subject index, edge index, object index) per edge, in edge order."""
    idx = g.index()
    return [(idx[e.subject], k, idx[e.object]) for k, e in enumerate(g.edges)]


# -- edits ---------------------------------------------------------------------

@dataclass(frozen=True)
class AddNode:
    """New node with edges to existing nodes.

    ``relations`` holds ``(predicate, other_id)`` pairs with the new node as
    subject; ``incoming`` holds ``(other_id, predicate)`` pairs pointing at it.
    """

    category: str
    relations: tuple[tuple[str, str], ...] = ()
    incoming: tuple[tuple[str, str], ...] = ()
    attributes: tuple[str, ...] = ()
    node_id: str | None = None


@dataclass(frozen=True)
class SetAttribute:
    node_id: str
    attribute: str


@dataclass(frozen=True)
class RemoveAttribute:
    node_id: str
    attribute: str


Edit = AddNode | SetAttribute | RemoveAttribute


def _fresh_id(existing: Iterable[str]) -> str:
    taken = set(existing)
    k = len(taken)
    while f"n{k}" in taken:
        k += 1
    return f"n{k}"


def apply_edit(g: SceneGraph, edit: Edit, vocab: Vocabulary | None = None, n_max: int = N_MAX) -> SceneGraph:
    """Return a new graph with ``edit`` applied; ``g`` is left untouched."""
    if isinstance(edit, AddNode):
        if len(g.nodes) + 1 > n_max:
            raise ConstraintError(f"adding a node would exceed {n_max} nodes")
        new_id = edit.node_id or _fresh_id(n.id for n in g.nodes)
        node = Node(new_id, edit.category, tuple(edit.attributes))
        edges = [Edge(new_id, pred, other) for pred, other in edit.relations]
        edges += [Edge(other, pred, new_id) for other, pred in edit.incoming]
        out = SceneGraph(g.nodes + (node,), g.edges + tuple(edges))
    elif isinstance(edit, (SetAttribute, RemoveAttribute)):
        target = g.node(edit.node_id)
        if vocab is not None and vocab.attributes and edit.attribute not in vocab.attributes:
            raise VocabularyError(f"unknown attribute {edit.attribute!r}")
        attrs = list(target.attributes)
        if isinstance(edit, SetAttribute):
            group = vocab.group_of(edit.attribute) if vocab is not None else None
            if group is not None:
                attrs = [a for a in attrs if a not in group or a == edit.attribute]
            if edit.attribute not in attrs:
                attrs.append(edit.attribute)
        else:
            if edit.attribute not in attrs:
                raise ConstraintError(f"node {edit.node_id!r} has no attribute {edit.attribute!r}")
            attrs.remove(edit.attribute)
        nodes = tuple(replace(n, attributes=tuple(attrs)) if n.id == edit.node_id else n for n in g.nodes)
        out = SceneGraph(nodes, g.edges)
    else:
        raise TypeError(f"unsupported edit {edit!r}")
    return validate(out, vocab, n_max)


def parse_edit(text: str, g: SceneGraph) -> Edit:
    """Parse the command-line edit syntax.

    ``set-attr ID ATTR``, ``remove-attr ID ATTR`` or ``add-node CAT REL ID``
    (the new node is the subject: "CAT REL ID").
    """
    parts = text.split()
    if not parts:
        raise ConstraintError("empty edit")
    verb = parts[0]
    if verb in ("set-attr", "remove-attr") and len(parts) == 3:
        cls = SetAttribute if verb == "set-attr" else RemoveAttribute
        return cls(parts[1], parts[2])
    if verb == "add-node" and len(parts) >= 4:
        # the predicate may contain spaces ("left of"); category first, target id last
        return AddNode(parts[1], ((" ".join(parts[2:-1]), parts[-1]),))
    raise ConstraintError(f"cannot parse edit {text!r}")
