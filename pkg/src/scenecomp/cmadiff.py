"""Pixel-space diffusion denoiser with compositional masked attention.

Visual tokens and per-object tokens are concatenated and attend to each
other under a membership mask, so a token only exchanges information
with the objects whose box contains it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .embedder import ATTR_DIM, TEXT_DIM, GraphBatch
from .scenegraph import N_MAX
from .slvae import SEMANTIC_DIM
from .tensorcore import MLP, LayerNorm, Linear, Module, Rng, Tensor, parameter

T_STEPS = 200
BETA_START = 1e-4
BETA_END = 0.05
IMAGE_SIZE = 16
CHANNELS = 3
PATCH = 2
GRID = IMAGE_SIZE // PATCH
N_VISUAL = GRID * GRID
D_VISUAL = 64
N_HEADS = 4
N_FREQ = 8
FOURIER_DIM = 4 * 2 * N_FREQ  # 64
D_OBJECT = 96
CFG_SCALE = 7.5
SAMPLE_ETA = 1.0  # ancestral updates unless a caller asks for deterministic ones
SAMPLE_STEPS = 50
COND_DROPOUT = 0.1


# -- noise schedule ---------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    T: int = T_STEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.T >= 1 and 0 < self.beta_start <= self.beta_end < 1):
            raise ValueError(f"bad schedule: T={self.T}, betas {self.beta_start}..{self.beta_end}")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        object.__setattr__(self, "betas", betas)
        # index 0 is the clean signal so alpha_bar[t] lines up with step t
        object.__setattr__(self, "alpha_bar", np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t


def add_noise(sched: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Closed-form forward marginal; ``t`` is a scalar or one step per batch row."""
    t = sched.check_step(t)
    ab = sched.alpha_bar[t].reshape(t.shape + (1,) * (np.ndim(z0) - t.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def timestep_pairs(sched: NoiseSchedule, steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs of a uniform stride from T down to 0."""
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}], got {steps}")
    ts = np.unique(np.round(np.linspace(0, sched.T, steps + 1)).astype(int))[::-1]
    return [(int(a), int(b)) for a, b in zip(ts[:-1], ts[1:])]


def guide(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(sched: NoiseSchedule, z: np.ndarray, t: int, t_prev: int, eps: np.ndarray,
              eta: float = 0.0, noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse update; ``eta=0`` is deterministic, ``eta=1`` ancestral."""
    ab, abp = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0 = np.clip((z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
    eps = (z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    sigma = eta * np.sqrt((1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp))
    out = np.sqrt(abp) * x0 + np.sqrt(max(1.0 - abp - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * noise
    return out


def to_image(z: np.ndarray) -> np.ndarray:
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)


def from_image(img: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


# -- boxes, membership, masks ------------------------------------------------

def fourier_features(boxes) -> np.ndarray:
    """Per coordinate: sin(2^k pi v) for k < 8, then the matching cosines."""
    b = np.asarray(boxes, dtype=np.float64)
    ang = b[..., :, None] * (np.pi * 2.0 ** np.arange(N_FREQ))
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feats.reshape(b.shape[:-1] + (FOURIER_DIM,))


def cell_centers_in_boxes(boxes, grid: tuple[int, int]) -> np.ndarray:
    """(H*W, N) boolean: cell (r, c) row-major, center inside box (half-open)."""
    H, W = grid
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cy = ((np.arange(H) + 0.5) / H).repeat(W)
    cx = np.tile((np.arange(W) + 0.5) / W, H)
    x, y, w, h = (b[:, k] for k in range(4))
    inside = (cx[:, None] >= x) & (cx[:, None] < x + w) & (cy[:, None] >= y) & (cy[:, None] < y + h)
    return inside


def token_membership(boxes, grid: tuple[int, int] = (GRID, GRID)) -> np.ndarray:
    return cell_centers_in_boxes(boxes, grid)


def build_cma_mask(membership: np.ndarray, n_objects: int, n_max: int = N_MAX) -> np.ndarray:
    """Additive (N_v + n_max)^2 mask: 0 where attention is allowed, -inf elsewhere.

    Visual tokens with no object form one group.  Object slot k < n_objects
    belongs to object k; padded slots see only themselves.
    """
    membership = np.asarray(membership, dtype=bool)
    n_v = membership.shape[0]
    if membership.shape[1] != n_objects or n_objects > n_max:
        raise ValueError(f"membership has {membership.shape[1]} columns for {n_objects} objects (max {n_max})")
    sets = np.zeros((n_v + n_max, n_max), dtype=bool)
    sets[:n_v, :n_objects] = membership
    sets[n_v + np.arange(n_objects), np.arange(n_objects)] = True
    bg = np.zeros(n_v + n_max, dtype=bool)
    bg[:n_v] = ~membership.any(axis=1)
    allowed = (sets.astype(np.int64) @ sets.T.astype(np.int64)) > 0
    allowed |= bg[:, None] & bg[None, :]
    np.fill_diagonal(allowed, True)
    return np.where(allowed, 0.0, -np.inf)


def null_mask(n_max: int = N_MAX, n_visual: int = N_VISUAL) -> np.ndarray:
    return build_cma_mask(np.zeros((n_visual, 0), dtype=bool), 0, n_max)


def masks_for_boxes(box_sets: Sequence[np.ndarray], n_max: int = N_MAX) -> np.ndarray:
    return np.stack([build_cma_mask(token_membership(b), len(b), n_max) for b in box_sets])


# -- attention ---------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * d)


class Attention(Module):
    """Multi-head attention; queries from ``x``, keys and values from ``ctx``."""

    def __init__(self, d_model: int, d_ctx: int, heads: int, rng: Rng):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self._heads = heads
        self.wq = Linear(d_model, d_model, rng.split("q"), bias=False)
        self.wk = Linear(d_ctx, d_model, rng.split("k"), bias=False)
        self.wv = Linear(d_ctx, d_model, rng.split("v"), bias=False)
        self.wo = Linear(d_model, d_model, rng.split("o"))
        self._last_weights: np.ndarray | None = None

    @property
    def last_weights(self) -> np.ndarray | None:
        """Post-softmax weights of the latest call, (B, heads, Nq, Nk)."""
        return self._last_weights

    def __call__(self, x: Tensor, ctx: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self._heads
        q, k, v = _split_heads(self.wq(x), h), _split_heads(self.wk(ctx), h), _split_heads(self.wv(ctx), h)
        logits = tc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(q.shape[-1]))
        if mask is not None:
            mask = np.asarray(mask)[:, None] if np.ndim(mask) == 3 else mask
        w = tc.softmax(logits, mask)
        self._last_weights = w.data
        return self.wo(_merge_heads(tc.matmul(w, v)))


class CMALayer(Module):
    """Masked self-attention over visual tokens followed by projected object tokens."""

    def __init__(self, d_object: int, d_visual: int, heads: int, rng: Rng):
        self._d_visual = d_visual
        self.norm = LayerNorm(d_visual)
        self.proj = MLP([d_object, d_visual, d_visual], rng.split("proj"))
        self.attn = Attention(d_visual, d_visual, heads, rng.split("attn"))

    @property
    def last_attention(self) -> np.ndarray | None:
        return self.attn.last_weights

    def __call__(self, v: Tensor, objects: Tensor, mask: np.ndarray) -> Tensor:
        if v.shape[-1] != self._d_visual:
            raise tc.ShapeError("cma_layer", v.shape, objects.shape)
        n_v = v.shape[1]
        seq = tc.concat([self.norm(v), self.proj(objects)], axis=1)
        if np.shape(mask)[-1] != seq.shape[1]:
            raise tc.ShapeError("cma_layer mask", np.shape(mask), seq.shape)
        out = self.attn(seq, seq, mask)
        return v + out[:, :n_v]


class Block(Module):
    def __init__(self, rng: Rng, d: int = D_VISUAL, heads: int = N_HEADS, d_object: int = D_OBJECT,
                 d_context: int = TEXT_DIM):
        self.norm_self = LayerNorm(d)
        self.self_attn = Attention(d, d, heads, rng.split("self"))
        self.cma = CMALayer(d_object, d, heads, rng.split("cma"))
        self.norm_cross = LayerNorm(d)
        self.cross_attn = Attention(d, d_context, heads, rng.split("cross"))
        self.norm_ff = LayerNorm(d)
        self.ff = MLP([d, 2 * d, d], rng.split("ff"))

    def __call__(self, h: Tensor, objects: Tensor, mask: np.ndarray, context: Tensor) -> Tensor:
        x = self.norm_self(h)
        h = h + self.self_attn(x, x)
        h = self.cma(h, objects, mask)
        h = h + self.cross_attn(self.norm_cross(h), context)
        return h + self.ff(self.norm_ff(h))


# -- tokenizer and denoiser --------------------------------------------------

class ObjectTokenizer(Module):
    """Fuses semantics, Fourier box codes and attribute vectors into object tokens."""

    def __init__(self, rng: Rng):
        fused = SEMANTIC_DIM + FOURIER_DIM
        self.fused_null = parameter(rng.split("c_null").normal((fused,)) * 0.5)
        self.context_null = parameter(rng.split("ctx_null").normal((TEXT_DIM,)) * (1 / np.sqrt(TEXT_DIM)))
        self.mlp_object = MLP([fused, 64, 64], rng.split("mlp_c"))
        self.mlp_attribute = MLP([ATTR_DIM, 64, D_OBJECT - 64], rng.split("mlp_a"))

    def fuse(self, sem: Tensor, boxes: np.ndarray, attrs: Tensor, gb: GraphBatch, n_max: int = N_MAX) -> Tensor:
        """(B, n_max, D_OBJECT) tokens; padded slots come from the null construction."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if sem.shape[0] != boxes.shape[0] or sem.shape[0] != gb.n_nodes:
            raise ValueError(f"fuse_tokens: {sem.shape[0]} semantics rows, {boxes.shape[0]} boxes, "
                             f"{gb.n_nodes} nodes")
        B = len(gb)
        if attrs.shape != (B, n_max, ATTR_DIM):
            raise ValueError(f"fuse_tokens: attribute block {attrs.shape}, expected {(B, n_max, ATTR_DIM)}")
        place, pad = gb.slot_placement(n_max)
        fused = tc.concat([sem, Tensor(fourier_features(boxes))], axis=1)
        slots = tc.matmul(Tensor(place), fused) + tc.mul(Tensor(pad), self.fused_null.reshape(1, -1))
        a = self.mlp_attribute(attrs.reshape(B * n_max, ATTR_DIM))
        tokens = tc.concat([self.mlp_object(slots), a], axis=1)
        return tokens.reshape(B, n_max, D_OBJECT)

    def null_tokens(self, attribute_null: Tensor) -> Tensor:
        """Single (D_OBJECT,) token used for every slot of the null condition."""
        c = self.mlp_object(self.fused_null.reshape(1, -1))
        a = self.mlp_attribute(attribute_null.reshape(1, ATTR_DIM))
        return tc.concat([c, a], axis=1).reshape(D_OBJECT)

    def context(self, gb: GraphBatch, object_text: np.ndarray, n_max: int = N_MAX) -> Tensor:
        place, pad = gb.slot_placement(n_max)
        ctx = Tensor(place @ object_text) + tc.mul(Tensor(pad), self.context_null.reshape(1, -1))
        return ctx.reshape(len(gb), n_max, TEXT_DIM)


def timestep_embedding(t, dim: int = D_VISUAL) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def patchify(z: np.ndarray | Tensor) -> Tensor:
    z = tc.as_tensor(z)
    B = z.shape[0]
    x = z.reshape(B, GRID, PATCH, GRID, PATCH, CHANNELS).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, N_VISUAL, PATCH * PATCH * CHANNELS)


def unpatchify(x: Tensor) -> Tensor:
    B = x.shape[0]
    x = x.reshape(B, GRID, GRID, PATCH, PATCH, CHANNELS).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)


class Denoiser(Module):
    """Patch transformer predicting the added noise of a 16x16 RGB canvas."""

    def __init__(self, rng: Rng, n_blocks: int = 2):
        pd = PATCH * PATCH * CHANNELS
        self.patch_embed = Linear(pd, D_VISUAL, rng.split("patch"))
        self.position = parameter(rng.split("pos").normal((N_VISUAL, D_VISUAL)) * 0.1)
        self.time_mlp = MLP([D_VISUAL, D_VISUAL, D_VISUAL], rng.split("time"))
        self.blocks = [Block(rng.split("block", i)) for i in range(n_blocks)]
        self.out_norm = LayerNorm(D_VISUAL)
        self.out = Linear(D_VISUAL, pd, rng.split("out"), scale=0.0)

    def __call__(self, z, t, objects: Tensor, mask: np.ndarray, context: Tensor) -> Tensor:
        z = tc.as_tensor(z)
        if z.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
            raise tc.ShapeError("denoiser", z.shape)
        B = z.shape[0]
        temb = self.time_mlp(Tensor(timestep_embedding(np.broadcast_to(t, (B,)))))
        h = self.patch_embed(patchify(z)) + self.position + temb.reshape(B, 1, D_VISUAL)
        for block in self.blocks:
            h = block(h, objects, mask, context)
        return unpatchify(self.out(self.out_norm(h)))


def diffusion_loss(eps: np.ndarray, eps_hat: Tensor) -> Tensor:
    """Per-element mean squared error between true and predicted noise."""
    return tc.mean(tc.square(eps_hat - eps))


def total_loss(l_ldm, l_union, l_layout, weights=(1.0, 0.1, 1.0)):
    w1, w2, w3 = weights
    return w1 * l_ldm + w2 * l_union + w3 * l_layout


# -- sampling ----------------------------------------------------------------

@dataclass(eq=False)
class CallCondition:
    """Everything one denoiser call is conditioned on.

    ``key`` identifies the condition (used by test doubles and for
    de-duplication); ``region`` is the canvas area the call's output will
    be used for, which region-local models may restrict themselves to.
    """

    key: tuple
    objects: np.ndarray | None = None
    mask: np.ndarray | None = None
    context: np.ndarray | None = None
    region: np.ndarray | None = None


class NoiseModel:
    """Interface of the noise predictors the samplers drive."""

    shape: tuple[int, ...] = (IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    region_invariant: bool = True

    def eps(self, z: np.ndarray, t: int, conds: Sequence[CallCondition]) -> np.ndarray:
        raise NotImplementedError


class DenoiserNoiseModel(NoiseModel):
    """Adapts a trained ``Denoiser`` to the sampler interface."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser

    def eps(self, z, t, conds):
        conds = list(conds)
        z = np.asarray(z)
        n = len(conds)
        if n == 1:
            # numpy routes a lone matrix through a different BLAS path; keep
            # every call batched so results do not depend on batch size
            conds, z = conds * 2, np.concatenate([z, z])
        objects = Tensor(np.stack([c.objects for c in conds]))
        mask = np.stack([c.mask for c in conds])
        context = Tensor(np.stack([c.context for c in conds]))
        return self.denoiser(z, t, objects, mask, context).data[:n]


def evaluate_calls(model: NoiseModel, z: np.ndarray, t: int, conds: Sequence[CallCondition]) -> list[np.ndarray]:
    """Run each (canvas, condition) call, sharing work between duplicates when allowed.

    ``z`` holds one canvas per call.  Identical (canvas, condition) pairs
    are evaluated once when the model ignores ``region``.
    """
    out: list[np.ndarray | None] = [None] * len(conds)
    seen: dict = {}
    items, owners = [], []
    for i, c in enumerate(conds):
        key = (c.key, z[i].tobytes()) if model.region_invariant else None
        if key is not None and key in seen:
            owners[seen[key]].append(i)
            continue
        if key is not None:
            seen[key] = len(items)
        items.append(i)
        owners.append([i])
    if items:
        res = model.eps(np.stack([z[i] for i in items]), t, [conds[i] for i in items])
        for r, group in zip(res, owners):
            for i in group:
                out[i] = r
    return out


def sample(model: NoiseModel, cond: CallCondition, uncond: CallCondition, rng: Rng,
           steps: int = SAMPLE_STEPS, cfg_scale: float = CFG_SCALE, eta: float = SAMPLE_ETA,
           sched: NoiseSchedule | None = None) -> np.ndarray:
    """Plain guided reverse process; returns the final canvas in [-1, 1] units."""
    sched = sched or NoiseSchedule()
    z = rng.normal(model.shape)
    for t, t_prev in timestep_pairs(sched, steps):
        ec, eu = evaluate_calls(model, np.stack([z, z]), t, [cond, uncond])
        noise = rng.normal(model.shape)
        z = ddim_step(sched, z, t, t_prev, guide(ec, eu, cfg_scale), eta, noise)
    return z
