"""The jointly trained scene-graph-to-image model."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import cmadiff as cd
from . import tensorcore as tc
from .cmadiff import CallCondition, DenoiserNoiseModel, NoiseSchedule
from .embedder import Embedder
from .scenegraph import N_MAX, Node, SceneGraph, Vocabulary, serialize
from .slvae import SLVAE, kl_loss, layout_loss, sample_latent
from .tensorcore import Module, Rng, Tensor

LOSS_WEIGHTS = (1.0, 0.1, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    n_max: int = N_MAX
    gcn_layers: int = 2
    denoiser_blocks: int = 2
    T: int = cd.T_STEPS
    beta_start: float = cd.BETA_START
    beta_end: float = cd.BETA_END

    def to_dict(self) -> dict:
        return asdict(self)


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


class SceneDiffusionModel(Module):
    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None):
        self._vocab = vocab
        self._config = config or ModelConfig()
        cfg = self._config
        rng = Rng(cfg.seed).split("init")
        self._sched = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.embedder = Embedder(vocab, rng.split("embedder"))
        self.slvae = SLVAE(rng.split("slvae"), cfg.gcn_layers)
        self.tokenizer = cd.ObjectTokenizer(rng.split("tokenizer"))
        self.denoiser = cd.Denoiser(rng.split("denoiser"), cfg.denoiser_blocks)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def schedule(self) -> NoiseSchedule:
        return self._sched

    # -- training ------------------------------------------------------
    def losses(self, graphs: Sequence[SceneGraph], images: np.ndarray, rng: Rng,
               dropout: float = cd.COND_DROPOUT, weights=LOSS_WEIGHTS) -> dict[str, Tensor]:
        emb, n_max = self.embedder, self._config.n_max
        gb = emb.batch(graphs)
        B = len(gb)
        edges = emb.embed_edges(gb)
        lat = self.slvae.encode_union(emb.embed_nodes(gb, use_boxes=True), edges, gb)
        u = sample_latent(lat, rng.split("latent"))
        dec = self.slvae.decoder_nodes(emb.node_base(gb), u)
        gt = gb.boxes()
        l_layout = layout_loss(self.slvae.decode_layout(dec, edges, gb), gt, gb.node_graph)
        sem = self.slvae.decode_semantics(dec, edges, gb)

        tokens = self.tokenizer.fuse(sem, gt, emb.embed_attributes(gb, n_max), gb, n_max)
        context = self.tokenizer.context(gb, emb.object_text(gb), n_max)
        masks = cd.masks_for_boxes([gt[gb.offsets[i]:gb.offsets[i + 1]] for i in range(B)], n_max)
        drop = rng.split("dropout").uniform((B,)) < dropout
        if drop.any():
            keep = (~drop).astype(np.float64)[:, None, None]
            null_tok = self.tokenizer.null_tokens(emb.attribute_null)
            tokens = tokens * keep + tc.mul(null_tok.reshape(1, 1, -1), Tensor(1.0 - keep))
            context = context * keep + tc.mul(self.tokenizer.context_null.reshape(1, 1, -1), Tensor(1.0 - keep))
            masks[drop] = cd.null_mask(n_max)

        x0 = cd.from_image(images)
        t = rng.split("t").integers(1, self._sched.T + 1, (B,))
        eps = rng.split("eps").normal(x0.shape)
        eps_hat = self.denoiser(cd.add_noise(self._sched, x0, t, eps), t, tokens, masks, context)
        l_ldm = cd.diffusion_loss(eps, eps_hat)
        l_union = kl_loss(lat)
        return {"total": cd.total_loss(l_ldm, l_union, l_layout, weights),
                "ldm": l_ldm, "union": l_union, "layout": l_layout}

    # -- inference -----------------------------------------------------
    def decode_view(self, g: SceneGraph, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Layout boxes and semantics rows for latent rows ``u`` (N, D_z)."""
        emb = self.embedder
        gb = emb.batch(g)
        edges = emb.embed_edges(gb)
        dec = self.slvae.decoder_nodes(emb.node_base(gb), Tensor(np.asarray(u, dtype=np.float64)))
        boxes = self.slvae.decode_layout(dec, edges, gb).data
        sem = self.slvae.decode_semantics(dec, edges, gb).data
        return boxes, sem

    def posterior_view(self, g: SceneGraph, rng: Rng | None) -> tuple[np.ndarray, np.ndarray]:
        """Decode from a latent drawn from the encoder given the true boxes (its mean when ``rng`` is None)."""
        emb = self.embedder
        gb = emb.batch(g)
        lat = self.slvae.encode_union(emb.embed_nodes(gb, True), emb.embed_edges(gb), gb)
        u = lat.mu if rng is None else sample_latent(lat, rng)
        return self.decode_view(g, u.data)

    def condition(self, g: SceneGraph, boxes: np.ndarray, sem: np.ndarray,
                  region: np.ndarray | None = None) -> CallCondition:
        emb, n_max = self.embedder, self._config.n_max
        gb = emb.batch(g)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        tokens = self.tokenizer.fuse(Tensor(sem), boxes, emb.embed_attributes(gb, n_max), gb, n_max)
        context = self.tokenizer.context(gb, emb.object_text(gb), n_max)
        mask = cd.build_cma_mask(cd.token_membership(boxes), len(boxes), n_max)
        key = ("cond", _digest(np.frombuffer(serialize(g), np.uint8), boxes, sem))
        return CallCondition(key, tokens.data[0], mask, context.data[0], region)

    def null_condition(self, region: np.ndarray | None = None) -> CallCondition:
        n_max = self._config.n_max
        tok = self.tokenizer.null_tokens(self.embedder.attribute_null).data
        ctx = self.tokenizer.context_null.data
        return CallCondition(("null",), np.tile(tok, (n_max, 1)), cd.null_mask(n_max),
                             np.tile(ctx, (n_max, 1)), region)


class ModelBackend:
    """Adapter giving the samplers what they need from a trained model."""

    def __init__(self, model: SceneDiffusionModel):
        self.model = model
        self.noise_model = DenoiserNoiseModel(model.denoiser)
        self.latent_dim = model.slvae.latent_dim
        self.schedule = model.schedule

    @property
    def shape(self):
        return self.noise_model.shape

    def decode_view(self, g: SceneGraph, u: np.ndarray):
        return self.model.decode_view(g, u)

    def object_condition(self, g: SceneGraph, i: int, box, sem_row, region=None) -> CallCondition:
        node = g.nodes[i]
        single = SceneGraph((Node(node.id, node.category, node.attributes, None),), ())
        return self.model.condition(single, np.asarray(box)[None], np.asarray(sem_row)[None], region)

    def scene_condition(self, g: SceneGraph, boxes, sem, region=None) -> CallCondition:
        return self.model.condition(g, boxes, sem, region)

    def null_condition(self, region=None) -> CallCondition:
        return self.model.null_condition(region)
