"""Self-checks behind ``check-grad`` and ``eval-masks``: finite differences and mask brute force."""
from __future__ import annotations

import time

import numpy as np

from . import cmadiff as cd
from . import tensorcore as tc
from .embedder import TEXT_DIM
from .tensorcore import Rng, Tensor, grad_check

GRAD_TOL = 1e-4
NEG = -np.inf


# -- per-op finite differences -------------------------------------------------------

def _weighted(op_fn, make_inputs):
    def build(rng: Rng):
        xs = make_inputs(rng)
        w = rng.normal(op_fn(*xs).shape)
        return lambda: tc.sum_(op_fn(*xs) * w), list(xs)
    return build


def _normal(*shapes, positive=()):
    def make(rng: Rng):
        out = []
        for k, s in enumerate(shapes):
            x = rng.normal(s)
            out.append(Tensor(np.abs(x) + 0.5 if k in positive else x))
        return tuple(out)
    return make


def _away_from_zero(rng: Rng):
    x = rng.normal((2, 3))
    return (Tensor(np.where(np.abs(x) < 0.05, 0.5, x)),)


def _masked_softmax(rng: Rng):
    m = np.where(rng.uniform((3, 4)) < 0.3, NEG, 0.0)
    m[:, 0] = 0.0
    x = Tensor(rng.normal((3, 4)))
    w = rng.normal((3, 4))
    return lambda: tc.sum_(tc.softmax(x, m) * w), [x]


OP_CASES = {
    "add": _weighted(tc.add, _normal((2, 3), (2, 3))),
    "add_broadcast": _weighted(tc.add, _normal((2, 3), (3,))),
    "sub": _weighted(tc.sub, _normal((2, 3), (2, 1))),
    "mul": _weighted(tc.mul, _normal((2, 3), (1, 3))),
    "div": _weighted(tc.div, _normal((2, 3), (2, 3), positive=(1,))),
    "matmul": _weighted(tc.matmul, _normal((2, 2, 3), (3, 4))),
    "concat": _weighted(lambda a, b: tc.concat([a, b], axis=1), _normal((2, 3), (2, 2))),
    "slice": _weighted(lambda a: a[:, 1:3], _normal((2, 4))),
    "take": _weighted(lambda a: tc.take(a, [0, 2, 0]), _normal((3, 2))),
    "reshape": _weighted(lambda a: a.reshape(3, 2), _normal((2, 3))),
    "transpose": _weighted(lambda a: a.transpose(2, 0, 1), _normal((2, 3, 2))),
    "sum": _weighted(lambda a: tc.sum_(a, axis=1), _normal((2, 3))),
    "mean": _weighted(lambda a: tc.mean(a, axis=0, keepdims=True), _normal((2, 3))),
    "broadcast": _weighted(lambda a: tc.broadcast_to(a, (2, 3)), _normal((1, 3))),
    "sigmoid": _weighted(tc.sigmoid, _normal((2, 3))),
    "tanh": _weighted(tc.tanh, _normal((2, 3))),
    "silu": _weighted(tc.silu, _normal((2, 3))),
    "exp": _weighted(tc.exp, _normal((2, 3))),
    "log": _weighted(tc.log, _normal((2, 3), positive=(0,))),
    "square": _weighted(tc.square, _normal((2, 3))),
    "l1": _weighted(tc.l1, _away_from_zero),
    "softmax": _weighted(tc.softmax, _normal((2, 3))),
    "softmax_masked": _masked_softmax,
    "layer_norm": _weighted(tc.layer_norm, _normal((2, 5))),
}


def op_sweep(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``trials`` random instances."""
    out = {}
    for name, build in OP_CASES.items():
        worst = 0.0
        for i in range(trials):
            fn, params = build(Rng(seed).split(name, i))
            worst = max(worst, grad_check(fn, params))
        out[name] = worst
    return out


# -- one denoiser block ---------------------------------------------------------------

def block_check(seed: int = 0, d: int = cd.D_VISUAL, heads: int = cd.N_HEADS, d_object: int = cd.D_OBJECT,
                d_context: int = TEXT_DIM, grid: tuple[int, int] = (cd.GRID, cd.GRID), n_max: int = 8,
                max_entries: int | None = 12) -> float:
    """Relative error of a whole [self-attn, CMA, cross-attn, FF] block against central differences.

    At production width the coordinates of each tensor are subsampled
    (``max_entries``); pass None to check every coordinate.
    """
    rng = Rng(seed).split("block-check")
    block = cd.Block(rng.split("block"), d=d, heads=heads, d_object=d_object, d_context=d_context)
    # nonzero output layers so every path carries gradient
    for p in block.parameters():
        if not np.any(p.data):
            p.data = rng.split("fill", p.data.size).normal(p.data.shape) * 0.1
    n_v = grid[0] * grid[1]
    boxes = [[0.0, 0.0, 0.5, 0.6], [0.3, 0.4, 0.6, 0.5], [0.6, 0.0, 0.4, 0.3]][: min(3, n_max)]
    membership = cd.token_membership(boxes, grid)
    mask = cd.build_cma_mask(membership, len(boxes), n_max)[None]
    h = Tensor(rng.normal((1, n_v, d)))
    objs = Tensor(rng.normal((1, n_max, d_object)))
    ctx = Tensor(rng.normal((1, n_max, d_context)))
    w = rng.normal((1, n_v, d))

    def f():
        return tc.sum_(block(h, objs, mask, ctx) * w)

    return grad_check(f, [h, objs, ctx] + block.parameters(), max_entries=max_entries, seed=seed)


def gradient_suite(trials: int = 20, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    ops = op_sweep(trials, seed)
    small = block_check(seed, d=8, heads=2, d_object=6, d_context=5, grid=(3, 3), n_max=3, max_entries=None)
    full = block_check(seed)
    worst = max(max(ops.values()), small, full)
    return {"ops": ops, "block_small_full_coverage": small, "block_production_subsampled": full,
            "worst": worst, "tolerance": GRAD_TOL, "passed": bool(worst < GRAD_TOL),
            "seconds": time.perf_counter() - t0}


# -- attention mask brute force ---------------------------------------------------------

def pairwise_mask(membership: np.ndarray, n_objects: int, n_max: int) -> np.ndarray:
    """The masking rule evaluated one (i, j) pair at a time."""
    n_v = len(membership)
    sets = [set(np.nonzero(row)[0]) for row in membership]
    sets += [{k} if k < n_objects else set() for k in range(n_max)]
    L = n_v + n_max
    out = np.full((L, L), NEG)
    for i in range(L):
        for j in range(L):
            both_bg = i < n_v and j < n_v and not sets[i] and not sets[j]
            if i == j or sets[i] & sets[j] or both_bg:
                out[i, j] = 0.0
    return out


def two_object_fixture() -> tuple[np.ndarray, np.ndarray]:
    """One token in object A, two in object B; returns (computed mask, expected mask)."""
    membership = np.array([[1, 0], [0, 1], [0, 1]], dtype=bool)
    allowed = {(0, 3), (1, 2), (1, 4), (2, 4)}
    allowed |= {(j, i) for i, j in allowed} | {(i, i) for i in range(5)}
    expected = np.array([[0.0 if (i, j) in allowed else NEG for j in range(5)] for i in range(5)])
    return cd.build_cma_mask(membership, 2, 2), expected


def mask_suite(n: int = 1000, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    got, want = two_object_fixture()
    fixture_ok = bool(np.array_equal(got, want))
    rng = Rng(seed).split("mask-suite")
    mismatches = 0
    for _ in range(n):
        n_max = int(rng.integers(1, 9))
        n_o = int(rng.integers(0, n_max + 1))
        n_v = int(rng.integers(1, 17))
        membership = rng.uniform((n_v, n_o)) < rng.uniform()
        if not np.array_equal(cd.build_cma_mask(membership, n_o, n_max), pairwise_mask(membership, n_o, n_max)):
            mismatches += 1
    return {"instances": n, "mismatches": mismatches, "fixture_exact": fixture_ok,
            "passed": fixture_ok and mismatches == 0, "seconds": time.perf_counter() - t0}


def leakage_suite(n: int = 100, seed: int = 0) -> dict:
    """Largest post-softmax weight on a masked pair over random denoiser passes."""
    den = cd.Denoiser(Rng(seed).split("leak-model"))
    rng = Rng(seed).split("leak")
    worst = 0.0
    for _ in range(n):
        n_o = int(rng.integers(0, 9))
        boxes = rng.uniform((n_o, 4)) * 0.6
        boxes[:, 2:] += 0.1
        masks = np.repeat(cd.masks_for_boxes([boxes], 8), 2, axis=0)
        den(rng.normal((2, 16, 16, 3)), rng.integers(1, 201, (2,)), Tensor(rng.normal((2, 8, cd.D_OBJECT))),
            masks, Tensor(rng.normal((2, 8, TEXT_DIM))))
        for block in den.blocks:
            w = block.cma.last_attention
            blocked = np.broadcast_to(np.isneginf(masks)[:, None], w.shape)
            if blocked.any():
                worst = max(worst, float(np.abs(w[blocked]).max()))
    return {"passes": n, "max_masked_weight": worst, "passed": worst == 0.0}
