"""Semantics-layout VAE over scene graphs, built from triplet-GCN layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .embedder import EDGE_DIM, NODE_DIM, GraphBatch
from .tensorcore import MLP, Module, Rng, Tensor

LATENT_DIM = 16
SEMANTIC_DIM = 64
MIN_BOX_SIZE = 1.0 / 64


class TripletGcnLayer(Module):
    """One round of message passing over (subject, edge, object) triples.

    ``g1`` maps each concatenated triple to new subject/edge/object
    candidates; a node's candidates are mean-pooled and passed through
    ``g2``.  Nodes that appear in no triple feed their previous state to
    ``g2`` instead.
    """

    def __init__(self, d_node: int, d_edge: int, rng: Rng, hidden: int = 64, residual: bool = True):
        self._dn, self._de = d_node, d_edge
        self._residual = residual
        width = 2 * d_node + d_edge
        self.g1 = MLP([width, hidden, width], rng.split("g1"))
        self.g2 = MLP([d_node, hidden, d_node], rng.split("g2"))

    def __call__(self, nodes: Tensor, edges: Tensor, subjects, objects) -> tuple[Tensor, Tensor]:
        dn, de = self._dn, self._de
        n = nodes.shape[0]
        subjects = np.asarray(subjects, dtype=np.intp)
        objects = np.asarray(objects, dtype=np.intp)
        m = subjects.size
        if m == 0:
            pooled = nodes
            new_edges = edges
        else:
            triple = tc.concat([tc.take(nodes, subjects), edges, tc.take(nodes, objects)], axis=1)
            cand = self.g1(triple)
            cand_s, cand_e, cand_o = cand[:, :dn], cand[:, dn:dn + de], cand[:, dn + de:]
            count = np.zeros(n)
            np.add.at(count, subjects, 1.0)
            np.add.at(count, objects, 1.0)
            isolated = (count == 0).astype(np.float64)[:, None]
            inv = 1.0 / np.maximum(count, 1.0)
            pool_s = np.zeros((n, m))
            pool_s[subjects, np.arange(m)] = inv[subjects]
            pool_o = np.zeros((n, m))
            pool_o[objects, np.arange(m)] = inv[objects]
            pooled = tc.matmul(Tensor(pool_s), cand_s) + tc.matmul(Tensor(pool_o), cand_o)
            if isolated.any():
                pooled = pooled + nodes * isolated
            new_edges = cand_e + edges if self._residual else cand_e
        out = self.g2(pooled)
        if self._residual:
            out = out + nodes
        return out, new_edges


def gcn_forward(layers, nodes: Tensor, edges: Tensor, subjects, objects) -> tuple[Tensor, Tensor]:
    for layer in layers:
        nodes, edges = layer(nodes, edges, subjects, objects)
    return nodes, edges


@dataclass
class GaussianLatent:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


def sample_latent(lat: GaussianLatent, rng: Rng) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps``."""
    eps = rng.normal(lat.mu.shape)
    return lat.mu + tc.exp(lat.log_sigma) * eps


def kl_loss(lat: GaussianLatent) -> Tensor:
    """KL to the standard normal prior, summed over dims and averaged over nodes."""
    mu, ls = lat.mu, lat.log_sigma
    per = 0.5 * (tc.square(mu) + tc.exp(2.0 * ls) - 1.0 - 2.0 * ls)
    return tc.mean(tc.sum_(per, axis=1))


def squash_boxes(raw: Tensor) -> Tensor:
    """Map unconstrained (N, 4) values to boxes that satisfy the box invariants.

    Sizes land in [1/64, 1]; the corner is then scaled into the room left
    by the size, so ``x + w <= 1`` and ``y + h <= 1`` hold by construction.
    """
    s = tc.sigmoid(raw)
    wh = MIN_BOX_SIZE + (1.0 - MIN_BOX_SIZE) * s[:, 2:4]
    xy = (1.0 - wh) * s[:, 0:2]
    return tc.concat([xy, wh], axis=1)


def layout_loss(pred: Tensor, gt: np.ndarray, node_graph: np.ndarray | None = None) -> Tensor:
    """Per-graph mean over objects of the L1 box error, averaged over graphs."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"layout_loss: {pred.shape[0]} predicted boxes vs {gt.shape[0]} targets")
    if node_graph is None:
        node_graph = np.zeros(gt.shape[0], dtype=np.intp)
    counts = np.bincount(node_graph)
    weight = 1.0 / (counts[node_graph] * len(counts))
    return tc.sum_(tc.l1(pred - gt) * weight[:, None])


class GraphDecoder(Module):
    def __init__(self, out_dim: int, rng: Rng, n_layers: int = 2):
        self.layers = [TripletGcnLayer(NODE_DIM, EDGE_DIM, rng.split("gcn", i)) for i in range(n_layers)]
        self.head = MLP([NODE_DIM, 64, out_dim], rng.split("head"))

    def __call__(self, nodes: Tensor, edges: Tensor, gb: GraphBatch) -> Tensor:
        h, _ = gcn_forward(self.layers, nodes, edges, gb.subjects, gb.objects)
        return self.head(h)


class SLVAE(Module):
    """Union encoder to per-node Gaussians plus layout and semantics decoders."""

    def __init__(self, rng: Rng, n_layers: int = 2, latent_dim: int = LATENT_DIM, semantic_dim: int = SEMANTIC_DIM):
        self._latent_dim = latent_dim
        self.encoder_layers = [TripletGcnLayer(NODE_DIM, EDGE_DIM, rng.split("enc", i)) for i in range(n_layers)]
        self.mu_head = MLP([NODE_DIM, 64, latent_dim], rng.split("mu"), last_scale=0.1)
        self.log_sigma_head = MLP([NODE_DIM, 64, latent_dim], rng.split("sigma"), last_scale=0.1)
        self.layout_decoder = GraphDecoder(4, rng.split("layout"), n_layers)
        self.semantic_decoder = GraphDecoder(semantic_dim, rng.split("semantic"), n_layers)

    @property
    def latent_dim(self) -> int:
        return self._latent_dim

    def encode_union(self, nodes: Tensor, edges: Tensor, gb: GraphBatch) -> GaussianLatent:
        h, _ = gcn_forward(self.encoder_layers, nodes, edges, gb.subjects, gb.objects)
        return GaussianLatent(self.mu_head(h), self.log_sigma_head(h))

    @staticmethod
    def decoder_nodes(node_base: Tensor, u) -> Tensor:
        """Category row and text vector with the latent draw in place of the box code."""
        return tc.concat([node_base, tc.as_tensor(u)], axis=1)

    def decode_layout(self, dec_nodes: Tensor, edges: Tensor, gb: GraphBatch) -> Tensor:
        return squash_boxes(self.layout_decoder(dec_nodes, edges, gb))

    def decode_semantics(self, dec_nodes: Tensor, edges: Tensor, gb: GraphBatch) -> Tensor:
        return self.semantic_decoder(dec_nodes, edges, gb)
