"""Layered sampling: one latent canvas per object plus a background layer.

Each step composes every view from the layers through that view's
non-overlapping masks, predicts noise per object with single-object
conditions, updates each view, and averages the views back into the
layers.  Unedited layers keep their seeds, which is what makes local
edits reproducible.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import cmadiff as cd
from .cmadiff import CallCondition, NoiseModel, NoiseSchedule
from .scenegraph import Edit, SceneGraph, Vocabulary, apply_edit, serialize
from .tensorcore import Rng, stable_hash

N_VIEWS = 5
_SEED_RANGE = 1 << 62


class MLSStateError(ValueError):
    """The stored seeds do not line up with the graph they are used with."""


class Backend(Protocol):
    noise_model: NoiseModel
    latent_dim: int
    schedule: NoiseSchedule

    def decode_view(self, g: SceneGraph, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def object_condition(self, g: SceneGraph, i: int, box, sem_row, region=None) -> CallCondition: ...

    def null_condition(self, region=None) -> CallCondition: ...


# -- seeds -------------------------------------------------------------------

def scene_hash(g: SceneGraph) -> str:
    return hashlib.sha256(serialize(g)).hexdigest()[:16]


def layer_rng(seed: int) -> Rng:
    """Stream that initializes a layer and supplies its per-step noise."""
    return Rng(seed).split("layer")


def _derived_seed(*parts) -> int:
    return stable_hash(":".join(str(p) for p in parts)) % _SEED_RANGE


@dataclass
class SeedState:
    """Sidecar contents: everything needed to replay or edit a layered sample."""

    scene_hash: str
    n_views: int
    per_layer_seeds: list[int]
    view_latent_seeds: list[list[int]]
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, g: SceneGraph, seed: int, n_views: int = N_VIEWS) -> "SeedState":
        if n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {n_views}")
        r = Rng(seed).split("mls")
        n = g.n_objects
        layers = r.split("layers").integers(0, _SEED_RANGE, (n + 1,))
        views = r.split("views").integers(0, _SEED_RANGE, (n_views, n))
        return cls(scene_hash(g), n_views, [int(s) for s in layers], [[int(s) for s in row] for row in views])

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str | bytes) -> "SeedState":
        try:
            doc = json.loads(text)
            return cls(str(doc["scene_hash"]), int(doc["n_views"]), [int(s) for s in doc["per_layer_seeds"]],
                       [[int(s) for s in row] for row in doc["view_latent_seeds"]], dict(doc.get("extra", {})))
        except (ValueError, KeyError, TypeError) as exc:
            raise MLSStateError(f"unreadable seed sidecar: {exc}") from exc

    def check(self, g: SceneGraph) -> None:
        n = g.n_objects
        if self.scene_hash != scene_hash(g):
            raise MLSStateError("seed sidecar belongs to a different scene graph")
        if len(self.per_layer_seeds) != n + 1 or len(self.view_latent_seeds) != self.n_views \
                or any(len(row) != n for row in self.view_latent_seeds):
            raise MLSStateError(f"seed sidecar does not match a graph with {n} objects")

    def extended(self, g_new: SceneGraph) -> "SeedState":
        """Seeds for an edited graph: old nodes keep theirs, new nodes get fresh ones."""
        n_old = len(self.per_layer_seeds) - 1
        new_ids = [node.id for node in g_new.nodes[n_old:]]
        layers = list(self.per_layer_seeds) + [_derived_seed(self.scene_hash, nid, "layer") for nid in new_ids]
        views = [list(row) + [_derived_seed(self.scene_hash, nid, "view", v) for nid in new_ids]
                 for v, row in enumerate(self.view_latent_seeds)]
        return SeedState(scene_hash(g_new), self.n_views, layers, views, dict(self.extra))


def view_latents(state: SeedState, latent_dim: int) -> list[np.ndarray]:
    """Per-view latent rows; each node's row comes from its own seed."""
    out = []
    for row in state.view_latent_seeds:
        u = [Rng(s).split("latent").normal((latent_dim,)) for s in row]
        out.append(np.array(u).reshape(len(row), latent_dim))
    return out


# -- views and masks -------------------------------------------------------------

@dataclass
class View:
    boxes: np.ndarray  # (N, 4)
    semantics: np.ndarray  # (N, D_s)
    labels: np.ndarray  # (H, W): 0 background, i + 1 object i

    def masks(self) -> np.ndarray:
        """(N + 1, H, W) boolean, background first."""
        return self.labels[None] == np.arange(len(self.boxes) + 1)[:, None, None]


def rasterize_nonoverlap(boxes, grid: tuple[int, int]) -> np.ndarray:
    """Label map with larger boxes painted first so smaller ones end on top.

    Equal areas paint in index order, so the higher index wins.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H, W = grid
    inside = cd.cell_centers_in_boxes(boxes, grid)
    labels = np.zeros(H * W, dtype=np.int64)
    area = boxes[:, 2] * boxes[:, 3]
    for i in sorted(range(len(boxes)), key=lambda k: (-area[k], k)):
        labels[inside[:, i]] = i + 1
    return labels.reshape(H, W)


def draw_views(backend: Backend, g: SceneGraph, latents: Sequence[np.ndarray], grid: tuple[int, int]) -> list[View]:
    views = []
    for u in latents:
        boxes, sem = backend.decode_view(g, u)
        views.append(View(np.asarray(boxes), np.asarray(sem), rasterize_nonoverlap(boxes, grid)))
    return views


def compose_view(layers: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Pick, per cell, the value of the layer the labels assign it to."""
    idx = labels[None, :, :, None] if layers.ndim == 4 else labels[None]
    idx = np.broadcast_to(idx, (1,) + layers.shape[1:])
    return np.take_along_axis(layers, idx, axis=0)[0]


def aggregate_layers(layers: np.ndarray, states: Sequence[np.ndarray], views: Sequence[View]) -> np.ndarray:
    """Masked average of the views per layer; cells no view assigns keep their value."""
    num = np.zeros_like(layers)
    den = np.zeros(layers.shape[:3] + (1,) * (layers.ndim - 3))
    for z, v in zip(states, views):
        m = v.masks().astype(np.float64).reshape(den.shape[:3] + (1,) * (layers.ndim - 3))
        num += m * z[None]
        den += m
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), layers)


def view_calls(backend: Backend, g: SceneGraph, view: View) -> list[tuple[int, CallCondition, CallCondition | None]]:
    """(label, condition, unconditional partner) for every non-empty region of a view."""
    calls = []
    bg = view.labels == 0
    if bg.any():
        calls.append((0, backend.null_condition(bg), None))
    for i in range(len(view.boxes)):
        region = view.labels == i + 1
        if region.any():
            cond = backend.object_condition(g, i, view.boxes[i], view.semantics[i], region)
            calls.append((i + 1, cond, backend.null_condition(region)))
    return calls


def mls_eps(backend: Backend, z_views: Sequence[np.ndarray], views: Sequence[View],
            view_conds: Sequence[list], t: int, cfg_scale: float) -> list[np.ndarray]:
    """Guided per-object noise estimates stitched together through each view's masks."""
    flat_z, flat_c, where = [], [], []
    for n, calls in enumerate(view_conds):
        for label, cond, uncond in calls:
            where.append((n, label, len(flat_c), uncond is not None))
            flat_z.append(z_views[n])
            flat_c.append(cond)
            if uncond is not None:
                flat_z.append(z_views[n])
                flat_c.append(uncond)
    res = cd.evaluate_calls(backend.noise_model, np.stack(flat_z), t, flat_c)
    out = [np.zeros_like(z) for z in z_views]
    for n, label, k, guided in where:
        e = cd.guide(res[k], res[k + 1], cfg_scale) if guided else res[k]
        sel = views[n].labels == label
        out[n][sel] = e[sel]
    return out


def mls_sample(backend: Backend, g: SceneGraph, state: SeedState, steps: int = cd.SAMPLE_STEPS,
               cfg_scale: float = cd.CFG_SCALE, eta: float = cd.SAMPLE_ETA,
               views: Sequence[View] | None = None) -> tuple[np.ndarray, list[View]]:
    """Run the layered reverse process; returns view 0's final composition and the views."""
    state.check(g)
    shape = backend.noise_model.shape
    grid = shape[:2]
    if views is None:
        views = draw_views(backend, g, view_latents(state, backend.latent_dim), grid)
    sched = backend.schedule
    streams = [layer_rng(s) for s in state.per_layer_seeds]
    layers = np.stack([r.normal(shape) for r in streams])
    conds = [view_calls(backend, g, v) for v in views]
    for t, t_prev in cd.timestep_pairs(sched, steps):
        z_views = [compose_view(layers, v.labels) for v in views]
        eps = mls_eps(backend, z_views, views, conds, t, cfg_scale)
        noise = np.stack([r.normal(shape) for r in streams])
        updated = [cd.ddim_step(sched, z, t, t_prev, e, eta, compose_view(noise, v.labels))
                   for z, e, v in zip(z_views, eps, views)]
        layers = aggregate_layers(layers, updated, views)
    return compose_view(layers, views[0].labels), list(views)


def edit_views(backend: Backend, g: SceneGraph, g_new: SceneGraph, state: SeedState,
               new_state: SeedState) -> list[View]:
    """Views of the edited graph that reuse every stored row of the unedited nodes."""
    grid = backend.noise_model.shape[:2]
    old = draw_views(backend, g, view_latents(state, backend.latent_dim), grid)
    new = draw_views(backend, g_new, view_latents(new_state, backend.latent_dim), grid)
    n_old = g.n_objects
    out = []
    for o, v in zip(old, new):
        boxes = np.concatenate([o.boxes, v.boxes[n_old:]])
        sem = np.concatenate([o.semantics, v.semantics[n_old:]])
        out.append(View(boxes, sem, rasterize_nonoverlap(boxes, grid)))
    return out


def edit_and_resample(backend: Backend, g: SceneGraph, edit: Edit, state: SeedState,
                      vocab: Vocabulary | None = None, steps: int = cd.SAMPLE_STEPS,
                      cfg_scale: float = cd.CFG_SCALE, eta: float = cd.SAMPLE_ETA):
    """Apply ``edit`` and resample with the stored seeds.

    Returns ``(before, after, edited_graph, edited_state)``.
    """
    state.check(g)
    g_new = apply_edit(g, edit, vocab)
    if g_new.n_objects < g.n_objects or any(a.id != b.id for a, b in zip(g.nodes, g_new.nodes)):
        raise MLSStateError("edit removed or reordered nodes; stored layers no longer line up")
    new_state = state.extended(g_new)
    before, _ = mls_sample(backend, g, state, steps, cfg_scale, eta)
    views = edit_views(backend, g, g_new, state, new_state)
    after, _ = mls_sample(backend, g_new, new_state, steps, cfg_scale, eta, views=views)
    return before, after, g_new, new_state
