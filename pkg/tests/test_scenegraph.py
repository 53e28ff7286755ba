import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenecomp.scenegraph import (
    AddNode,
    BoundingBox,
    ConstraintError,
    DanglingReferenceError,
    Edge,
    GraphParseError,
    Node,
    RemoveAttribute,
    SceneGraph,
    SetAttribute,
    Vocabulary,
    VocabularyError,
    apply_edit,
    parse_edit,
    parse_scene_graph,
    serialize,
    to_triples,
)

VOCAB = Vocabulary(
    categories=("circle", "square", "triangle"),
    predicates=("left of", "above", "inside", "same color as", "touching"),
    attributes=("red", "green", "blue", "small", "large"),
    exclusive_groups=(("red", "green", "blue"), ("small", "large")),
)

BASIC = (b'{"nodes":[{"id":"a","category":"circle"},{"id":"b","category":"square"}],'
         b'"edges":[{"subject":"a","predicate":"left of","object":"b"}]}')


def test_parse_basic():
    g = parse_scene_graph(BASIC, VOCAB)
    assert g.n_objects == 2 and len(g.edges) == 1
    assert [n.id for n in g.nodes] == ["a", "b"]


def test_dangling_reference():
    doc = json.loads(BASIC)
    doc["edges"][0]["object"] = "zz"
    with pytest.raises(DanglingReferenceError):
        parse_scene_graph(json.dumps(doc), VOCAB)


def test_self_loop_is_constraint_error():
    doc = json.loads(BASIC)
    doc["edges"][0]["object"] = "a"
    with pytest.raises(ConstraintError):
        parse_scene_graph(json.dumps(doc), VOCAB)


def test_syntax_error_reports_line():
    with pytest.raises(GraphParseError) as err:
        parse_scene_graph(b'{\n"nodes": [\n}', VOCAB)
    assert err.value.line == 3


@pytest.mark.parametrize("doc,exc", [
    ({"nodes": [{"id": "a", "category": "hexagon"}], "edges": []}, VocabularyError),
    ({"nodes": [{"id": "a", "category": "circle"}, {"id": "b", "category": "circle"}],
      "edges": [{"subject": "a", "predicate": "eats", "object": "b"}]}, VocabularyError),
    ({"nodes": [{"id": "a", "category": "circle", "color": "red"}], "edges": []}, GraphParseError),
    ({"nodes": [], "edges": []}, ConstraintError),
    ({"nodes": [{"id": "a", "category": "circle"}] * 2, "edges": []}, ConstraintError),
    ({"nodes": [{"id": "a", "category": "circle", "bbox": [0.5, 0, 0.6, 0.2]}], "edges": []}, ConstraintError),
    ({"nodes": [{"id": "a", "category": "circle"}], "edges": [], "extra": 1}, GraphParseError),
])
def test_rejections(doc, exc):
    with pytest.raises(exc):
        parse_scene_graph(json.dumps(doc), VOCAB)


def test_too_many_nodes():
    doc = {"nodes": [{"id": f"o{i}", "category": "circle"} for i in range(9)], "edges": []}
    with pytest.raises(ConstraintError):
        parse_scene_graph(json.dumps(doc), VOCAB)


def test_parallel_edges_allowed():
    doc = json.loads(BASIC)
    doc["edges"].append({"subject": "a", "predicate": "touching", "object": "b"})
    assert len(parse_scene_graph(json.dumps(doc), VOCAB).edges) == 2


def test_triples():
    g = parse_scene_graph(BASIC, VOCAB)
    assert to_triples(g) == [(0, 0, 1)]
    lone = SceneGraph((Node("a", "circle"),))
    assert to_triples(lone) == []
    three = SceneGraph((Node("a", "circle"), Node("b", "square"), Node("c", "triangle")),
                       (Edge("a", "above", "b"), Edge("c", "left of", "a")))
    assert to_triples(three) == [(0, 0, 1), (2, 1, 0)]


def test_set_attribute_and_immutability():
    g = parse_scene_graph(BASIC, VOCAB)
    g2 = apply_edit(g, SetAttribute("a", "red"), VOCAB)
    assert g2.node("a").attributes == ("red",)
    assert g.node("a").attributes == ()
    g3 = apply_edit(g2, SetAttribute("a", "blue"), VOCAB)
    assert g3.node("a").attributes == ("blue",)
    assert apply_edit(g3, RemoveAttribute("a", "blue"), VOCAB).node("a").attributes == ()
    assert g3.nodes[1] is g.nodes[1] and g3.edges == g.edges


def test_add_node():
    g = parse_scene_graph(BASIC, VOCAB)
    g2 = apply_edit(g, AddNode("triangle", (("above", "a"),)), VOCAB)
    assert g2.n_objects == 3 and len(g2.edges) == 2
    assert g2.edges[:1] == g.edges and g2.nodes[:2] == g.nodes
    assert g2.edges[1].object == "a"


def test_add_node_beyond_nmax():
    g = SceneGraph(tuple(Node(f"o{i}", "circle") for i in range(8)))
    with pytest.raises(ConstraintError):
        apply_edit(g, AddNode("square"), VOCAB)


def test_parse_edit_syntax():
    g = parse_scene_graph(BASIC, VOCAB)
    assert parse_edit("set-attr a red", g) == SetAttribute("a", "red")
    assert parse_edit("add-node triangle left of b", g) == AddNode("triangle", (("left of", "b"),))
    with pytest.raises(ConstraintError):
        parse_edit("rotate a", g)


# -- properties ----------------------------------------------------------------

@st.composite
def graphs(draw):
    n = draw(st.integers(1, 8))
    nodes = []
    for i in range(n):
        box = None
        if draw(st.booleans()):
            x, y = draw(st.integers(0, 12)), draw(st.integers(0, 12))
            w, h = draw(st.integers(1, 16 - x)), draw(st.integers(1, 16 - y))
            box = BoundingBox(x / 16, y / 16, w / 16, h / 16)
        attrs = tuple(draw(st.lists(st.sampled_from(VOCAB.attributes), max_size=2, unique=True)))
        nodes.append(Node(f"n{i}", draw(st.sampled_from(VOCAB.categories)), attrs, box))
    edges = []
    if n > 1:
        for _ in range(draw(st.integers(0, 6))):
            s, o = draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
            edges.append(Edge(f"n{s}", draw(st.sampled_from(VOCAB.predicates)), f"n{o}"))
    return SceneGraph(tuple(nodes), tuple(edges))


@settings(max_examples=200, deadline=None)
@given(graphs())
def test_round_trip_and_triples(g):
    assert parse_scene_graph(serialize(g), VOCAB) == g
    assert serialize(parse_scene_graph(serialize(g), VOCAB)) == serialize(g)
    assert len(to_triples(g)) == len(g.edges)
