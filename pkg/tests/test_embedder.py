import numpy as np

from scenecomp import synthdata as sd
from scenecomp.embedder import ATTR_DIM, EDGE_DIM, NODE_DIM, Embedder, PseudoTextEncoder
from scenecomp.scenegraph import BoundingBox, Edge, Node, SceneGraph
from scenecomp.tensorcore import Rng, Tensor


def make_embedder():
    return Embedder(sd.VOCAB, Rng(0))


def two_node_graph(b0=(0.1, 0.1, 0.2, 0.2), b1=(0.5, 0.5, 0.3, 0.3), attrs=(("red",), ())):
    nodes = (Node("a", "circle", attrs[0], BoundingBox(*b0)), Node("b", "square", attrs[1], BoundingBox(*b1)))
    return SceneGraph(nodes, (Edge("a", "left of", "b"),))


def test_dimensions():
    emb = make_embedder()
    gb = emb.batch(two_node_graph())
    assert emb.embed_nodes(gb, True).shape == (2, NODE_DIM) == (2, 80)
    assert emb.embed_edges(gb).shape == (1, EDGE_DIM) == (1, 64)
    assert emb.embed_attributes(gb).shape == (1, 8, ATTR_DIM) and ATTR_DIM == 48


def test_category_row_leads_node_vector():
    emb = make_embedder()
    gb = emb.batch(two_node_graph())
    v = emb.embed_nodes(gb, True).data
    cat = sd.VOCAB.categories.index("square")
    np.testing.assert_array_equal(v[1, :32], emb.category_table.data[cat])


def test_inference_box_slice_is_zero():
    emb = make_embedder()
    v = emb.embed_nodes(emb.batch(two_node_graph()), use_boxes=False).data
    assert np.all(v[:, 64:] == 0.0)


def test_same_category_different_boxes():
    emb = make_embedder()
    g1, g2 = two_node_graph(), two_node_graph(b0=(0.6, 0.0, 0.3, 0.4))
    v1 = emb.embed_nodes(emb.batch(g1), True).data[0]
    v2 = emb.embed_nodes(emb.batch(g2), True).data[0]
    np.testing.assert_array_equal(v1[:64], v2[:64])
    assert not np.allclose(v1[64:], v2[64:])
    np.testing.assert_allclose(v2[64:], emb.box_encoder(Tensor(np.array([[0.6, 0.0, 0.3, 0.4]]))).data[0])


def test_edge_text_and_identical_edges():
    emb = make_embedder()
    g = two_node_graph()
    g = SceneGraph(g.nodes, g.edges + (Edge("a", "left of", "b"),))
    gb = emb.batch(g)
    assert gb.edge_texts[0] == "circle left of square"
    e = emb.embed_edges(gb).data
    np.testing.assert_array_equal(e[0], e[1])
    np.testing.assert_array_equal(e[0, 32:], emb.text_encoder("circle left of square"))


def test_zero_edges_give_empty_matrix():
    emb = make_embedder()
    g = SceneGraph((Node("a", "circle", (), None),), ())
    assert emb.embed_edges(emb.batch(g)).shape == (0, 64)


def test_attribute_rows():
    emb = make_embedder()
    g = two_node_graph(attrs=(("red", "small"), ()))
    a = emb.embed_attributes(emb.batch(g)).data[0]
    tab = emb.attribute_table.data
    idx = [sd.VOCAB.attributes.index(x) for x in ("red", "small")]
    np.testing.assert_allclose(a[0, :16], tab[idx].mean(axis=0))
    np.testing.assert_array_equal(a[0, 16:], emb.text_encoder("red small"))
    for slot in range(1, 8):
        np.testing.assert_array_equal(a[slot], emb.attribute_null.data)


def test_pseudo_text_encoder_is_deterministic_unit_norm():
    e1, e2 = PseudoTextEncoder(), PseudoTextEncoder()
    words = [f"word {i}" for i in range(1000)]
    a, b = e1.encode(words), e2.encode(words)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)
    assert len({v.tobytes() for v in a}) == 1000


def test_batch_offsets():
    emb = make_embedder()
    gs = [sd.generate_scene(s).graph for s in range(5)]
    gb = emb.batch(gs)
    assert gb.n_nodes == sum(g.n_objects for g in gs)
    place, pad = gb.slot_placement()
    assert place.shape == (40, gb.n_nodes)
    assert pad.sum() == 40 - gb.n_nodes
