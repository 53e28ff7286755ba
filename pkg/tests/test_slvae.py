import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenecomp import slvae
from scenecomp import tensorcore as tc
from scenecomp.slvae import GaussianLatent, TripletGcnLayer
from scenecomp.tensorcore import Rng, Tensor


def reference_layer(layer, nodes, edges, subj, obj):
    """Loop-by-loop oracle for one triplet-GCN round."""
    dn, de = nodes.shape[1], edges.shape[1]
    g1 = lambda v: layer.g1(Tensor(v[None])).data[0]
    g2 = lambda v: layer.g2(Tensor(v[None])).data[0]
    cands = [[] for _ in nodes]
    new_edges = edges.copy()
    for k, (s, o) in enumerate(zip(subj, obj)):
        c = g1(np.concatenate([nodes[s], edges[k], nodes[o]]))
        cands[s].append(c[:dn])
        cands[o].append(c[dn + de:])
        new_edges[k] = c[dn:dn + de] + edges[k]
    out = np.stack([g2(np.mean(c, axis=0) if c else nodes[i]) + nodes[i] for i, c in enumerate(cands)])
    return out, new_edges


def random_graph(rng, n, m, dn=6, de=4):
    nodes = rng.normal((n, dn))
    edges = rng.normal((m, de))
    subj = rng.integers(0, n, (m,))
    obj = rng.integers(0, n, (m,))
    return nodes, edges, subj, obj


def test_no_edges_is_g2_plus_residual():
    layer = TripletGcnLayer(6, 4, Rng(1))
    nodes = Rng(2).normal((3, 6))
    out, e = layer(Tensor(nodes), Tensor(np.zeros((0, 4))), [], [])
    np.testing.assert_allclose(out.data, layer.g2(Tensor(nodes)).data + nodes)
    assert e.shape == (0, 4)


@pytest.mark.parametrize("seed", range(10))
def test_layer_matches_loop_oracle(seed):
    rng = Rng(seed)
    layer = TripletGcnLayer(6, 4, rng.split("layer"), hidden=8)
    nodes, edges, subj, obj = random_graph(rng, 5, 6)
    out, e = layer(Tensor(nodes), Tensor(edges), subj, obj)
    ref_out, ref_e = reference_layer(layer, nodes, edges, subj, obj)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    np.testing.assert_allclose(e.data, ref_e, atol=1e-12)


def test_identity_mlps_pass_nodes_through():
    layer = TripletGcnLayer(6, 4, Rng(0), residual=False)
    layer.g1 = layer.g2 = lambda x: x
    nodes, edges, subj, obj = random_graph(Rng(3), 4, 5)
    out, e = layer(Tensor(nodes), Tensor(edges), subj, obj)
    np.testing.assert_allclose(out.data, nodes)
    np.testing.assert_allclose(e.data, edges)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10), st.integers(0, 10_000))
def test_permutation_equivariance(n, m, seed):
    rng = Rng(seed)
    layers = [TripletGcnLayer(6, 4, rng.split("l", i), hidden=8) for i in range(2)]
    nodes, edges, subj, obj = random_graph(rng, n, m)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    out, e = slvae.gcn_forward(layers, Tensor(nodes), Tensor(edges), subj, obj)
    out_p, e_p = slvae.gcn_forward(layers, Tensor(nodes[perm]), Tensor(edges), inv[subj], inv[obj])
    np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-10)
    np.testing.assert_allclose(e_p.data, e.data, atol=1e-10)


def test_layer_gradients():
    rng = Rng(5)
    layer = TripletGcnLayer(6, 4, rng.split("layer"), hidden=8)
    nodes, edges, subj, obj = random_graph(rng, 4, 5)
    xn, xe = Tensor(nodes, requires_grad=True), Tensor(edges, requires_grad=True)

    def f():
        out, e = layer(xn, xe, subj, obj)
        return tc.sum_(tc.square(out)) + tc.sum_(tc.tanh(e))

    assert tc.grad_check(f, [xn, xe] + layer.parameters()) < 1e-4


def test_kl_zero_at_prior():
    lat = GaussianLatent(Tensor(np.zeros((3, 16))), Tensor(np.zeros((3, 16))))
    assert slvae.kl_loss(lat).item() == 0.0


def test_kl_matches_monte_carlo():
    rng = Rng(7)
    mu, ls = rng.normal((2, 3)) * 0.7, rng.normal((2, 3)) * 0.3
    closed = slvae.kl_loss(GaussianLatent(Tensor(mu), Tensor(ls))).item()
    z = mu + np.exp(ls) * rng.normal((200_000, 2, 3))
    log_q = -0.5 * ((z - mu) / np.exp(ls)) ** 2 - ls
    log_p = -0.5 * z ** 2
    mc = (log_q - log_p).sum(axis=2).mean()
    assert abs(closed - mc) < 0.02


def test_sample_latent_reparameterizes():
    mu, ls = np.full((2, 4), 0.5), np.full((2, 4), np.log(0.1))
    lat = GaussianLatent(Tensor(mu), Tensor(ls))
    u = slvae.sample_latent(lat, Rng(3))
    np.testing.assert_allclose(u.data, mu + 0.1 * Rng(3).normal((2, 4)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-40, 40), min_size=4, max_size=4))
def test_squashed_boxes_are_valid(raw):
    b = slvae.squash_boxes(Tensor(np.array([raw]))).data[0]
    x, y, w, h = b
    assert 1 / 64 - 1e-12 <= w <= 1 and 1 / 64 - 1e-12 <= h <= 1
    assert x >= 0 and y >= 0 and x + w <= 1 + 1e-12 and y + h <= 1 + 1e-12


def test_layout_loss_example():
    pred = Tensor(np.array([[0.1, 0.1, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]]))
    gt = np.array([[0.1, 0.1, 0.2, 0.2], [0.6, 0.5, 0.2, 0.1]])
    assert slvae.layout_loss(pred, gt).item() == pytest.approx(0.1)
    # two graphs of different sizes count equally
    loss = slvae.layout_loss(pred, gt, node_graph=np.array([0, 1]))
    assert loss.item() == pytest.approx(0.1)
    with pytest.raises(ValueError):
        slvae.layout_loss(pred, gt[:1])


def test_slvae_end_to_end_shapes():
    from scenecomp import synthdata as sd
    from scenecomp.embedder import Embedder

    emb = Embedder(sd.VOCAB, Rng(0))
    vae = slvae.SLVAE(Rng(1))
    gb = emb.batch([sd.generate_scene(s).graph for s in range(3)])
    lat = vae.encode_union(emb.embed_nodes(gb, True), emb.embed_edges(gb), gb)
    assert lat.mu.shape == (gb.n_nodes, 16)
    u = slvae.sample_latent(lat, Rng(2))
    dec = vae.decoder_nodes(emb.node_base(gb), u)
    assert vae.decode_layout(dec, emb.embed_edges(gb), gb).shape == (gb.n_nodes, 4)
    assert vae.decode_semantics(dec, emb.embed_edges(gb), gb).shape == (gb.n_nodes, 64)
