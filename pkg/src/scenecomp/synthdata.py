"""Colored-shape scenes: generator, renderer, blob oracle and metrics.

Geometry lives on the 16x16 pixel grid.  A box is an integer pixel
rectangle ``(x, y, w, h)``; its normalized form divides by the grid size.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .scenegraph import BoundingBox, Edge, Node, SceneGraph, Vocabulary, from_dict, to_dict
from .tensorcore import Rng

GRID = 16
CATEGORIES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
SIZES = ("small", "large")
SPATIAL = ("left of", "above", "inside")
NON_SPATIAL = ("same color as", "touching")
PREDICATES = SPATIAL + NON_SPATIAL

BACKGROUND = np.array([128, 128, 128], dtype=np.uint8)
PALETTE = {
    "red": np.array([255, 0, 0], dtype=np.uint8),
    "green": np.array([0, 255, 0], dtype=np.uint8),
    "blue": np.array([0, 0, 255], dtype=np.uint8),
}

VOCAB = Vocabulary(
    categories=CATEGORIES,
    predicates=PREDICATES,
    attributes=COLORS + SIZES,
    exclusive_groups=(COLORS, SIZES),
)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    min_objects: int = 1
    max_objects: int = 4
    edge_density: float = 0.5
    predicate_weights: dict = field(default_factory=lambda: {
        "left of": 0.3, "above": 0.3, "inside": 0.1, "same color as": 0.15, "touching": 0.15})
    min_size: int = 3
    max_size: int = 8
    attempts: int = 300
    restarts: int = 20


@dataclass(frozen=True)
class SceneSpec:
    categories: tuple[str, ...]
    colors: tuple[str, ...]
    rects: tuple[tuple[int, int, int, int], ...]
    relations: tuple[tuple[int, str, int], ...] = ()

    def graph(self) -> SceneGraph:
        nodes = tuple(
            Node(f"o{i}", c, (col,), BoundingBox(x / GRID, y / GRID, w / GRID, h / GRID))
            for i, (c, col, (x, y, w, h)) in enumerate(zip(self.categories, self.colors, self.rects))
        )
        edges = tuple(Edge(f"o{s}", p, f"o{o}") for s, p, o in self.relations)
        return SceneGraph(nodes, edges)


@dataclass(frozen=True)
class RenderedScene:
    image: np.ndarray  # (16, 16, 3) float in [0, 1]
    graph: SceneGraph
    spec: SceneSpec


# -- geometry -----------------------------------------------------------------

def rect_gap(a, b) -> int:
    """L-inf gap in pixels between two rectangles; negative when they overlap."""
    hg = max(b[0] - (a[0] + a[2]), a[0] - (b[0] + b[2]))
    vg = max(b[1] - (a[1] + a[3]), a[1] - (b[1] + b[3]))
    return max(hg, vg)


def strictly_inside(a, b) -> bool:
    return (a[0] >= b[0] + 1 and a[1] >= b[1] + 1
            and a[0] + a[2] <= b[0] + b[2] - 1 and a[1] + a[3] <= b[1] + b[3] - 1)


def relation_holds(pred: str, a, b, col_a: str, col_b: str) -> bool:
    if pred == "left of":
        return 2 * a[0] + a[2] < 2 * b[0] + b[2]
    if pred == "above":
        return 2 * a[1] + a[3] < 2 * b[1] + b[3]
    if pred == "inside":
        return strictly_inside(a, b)
    if pred == "same color as":
        return col_a == col_b
    if pred == "touching":
        return 0 <= rect_gap(a, b) <= 1
    raise ValueError(f"unknown predicate {pred!r}")


def _pair_ok(a, b, same_color: bool, nested: bool) -> bool:
    if nested:
        return True
    gap = rect_gap(a, b)
    return gap >= (1 if same_color else 0)


# -- generator ----------------------------------------------------------------

def _sample_relations(rng: Rng, cats: list[str], cfg: GeneratorConfig):
    n = len(cats)
    preds = list(cfg.predicate_weights)
    weights = np.array([cfg.predicate_weights[p] for p in preds], dtype=np.float64)
    cdf = np.cumsum(weights / weights.sum())
    parent = [-1] * n  # inside-parent of each object
    is_outer = [False] * n
    relations = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() >= cfg.edge_density:
                continue
            s, o = (i, j) if rng.uniform() < 0.5 else (j, i)
            pred = preds[int(np.searchsorted(cdf, rng.uniform(), side="right").clip(0, len(preds) - 1))]
            if pred == "inside":
                if cats[o] != "square" or parent[s] >= 0 or is_outer[s] or parent[o] >= 0:
                    pred = "left of" if rng.uniform() < 0.5 else "above"
                else:
                    parent[s] = o
                    is_outer[o] = True
            relations.append((s, pred, o))
    return relations, parent


def _assign_colors(rng: Rng, n: int, relations, parent) -> list[str] | None:
    group = list(range(n))

    def find(k):
        while group[k] != k:
            group[k] = group[group[k]]
            k = group[k]
        return k

    for s, p, o in relations:
        if p == "same color as":
            group[find(s)] = find(o)
    differ = [(k, parent[k]) for k in range(n) if parent[k] >= 0]
    for _ in range(20):
        pick = {}
        colors = []
        for k in range(n):
            root = find(k)
            if root not in pick:
                pick[root] = COLORS[int(rng.integers(0, len(COLORS)))]
            colors.append(pick[root])
        if all(colors[a] != colors[b] for a, b in differ):
            return colors
    return None


def _sample_rects(rng: Rng, parent, cfg: GeneratorConfig):
    n = len(parent)
    u = rng.uniform((n, 4))
    rects: list = [None] * n

    def pick(k, col, lo, hi):  # integer in [lo, hi]
        return lo + min(int(u[k, col] * (hi - lo + 1)), hi - lo)

    order = [k for k in range(n) if parent[k] < 0] + [k for k in range(n) if parent[k] >= 0]
    for k in order:
        if parent[k] < 0:
            lo = cfg.min_size + 2 if k in parent else cfg.min_size
            w, h = pick(k, 0, lo, cfg.max_size), pick(k, 1, lo, cfg.max_size)
            x, y = pick(k, 2, 0, GRID - w), pick(k, 3, 0, GRID - h)
        else:
            ox, oy, ow, oh = rects[parent[k]]
            w, h = pick(k, 0, cfg.min_size, ow - 2), pick(k, 1, cfg.min_size, oh - 2)
            x, y = pick(k, 2, ox + 1, ox + ow - 1 - w), pick(k, 3, oy + 1, oy + oh - 1 - h)
        rects[k] = (x, y, w, h)
    return rects


def _valid(rects, colors, relations, parent) -> bool:
    n = len(rects)
    for i in range(n):
        for j in range(i + 1, n):
            nested = parent[i] == j or parent[j] == i
            if not _pair_ok(rects[i], rects[j], colors[i] == colors[j], nested):
                return False
    return all(relation_holds(p, rects[s], rects[o], colors[s], colors[o]) for s, p, o in relations)


def generate_spec(seed: int, config: GeneratorConfig | None = None) -> SceneSpec:
    cfg = config or GeneratorConfig()
    base = Rng(seed)
    n = int(base.integers(cfg.min_objects, cfg.max_objects + 1))
    for restart in range(cfg.restarts):
        rng = base.split("restart", restart)
        cats = [CATEGORIES[int(rng.integers(0, len(CATEGORIES)))] for _ in range(n)]
        relations, parent = _sample_relations(rng, cats, cfg)
        colors = _assign_colors(rng, n, relations, parent)
        if colors is None:
            continue
        for _ in range(cfg.attempts):
            rects = _sample_rects(rng, parent, cfg)
            if _valid(rects, colors, relations, parent):
                return SceneSpec(tuple(cats), tuple(colors), tuple(rects), tuple(relations))
    raise GenerationError(f"seed {seed}: no valid scene after {cfg.restarts} restarts")


def generate_scene(seed: int, config: GeneratorConfig | None = None) -> RenderedScene:
    spec = generate_spec(seed, config)
    return RenderedScene(render(spec), spec.graph(), spec)


# -- rendering ----------------------------------------------------------------

def shape_mask(category: str, rect, grid: int = GRID) -> np.ndarray:
    x, y, w, h = rect
    py, px = np.mgrid[0:grid, 0:grid].astype(np.float64) + 0.5
    cx, cy = x + w / 2, y + h / 2
    inside = (px > x) & (px < x + w) & (py > y) & (py < y + h)
    if category == "square":
        return inside
    if category == "circle":
        return inside & (((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2 <= 1.0)
    if category == "triangle":
        t = (py - y) / h
        return inside & (np.abs(px - cx) <= t * w / 2 + 0.5)
    raise ValueError(f"unknown category {category!r}")


def render_uint8(spec: SceneSpec) -> np.ndarray:
    img = np.empty((GRID, GRID, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    areas = [r[2] * r[3] for r in spec.rects]
    # larger first, so smaller shapes end on top; ties keep index order
    for k in sorted(range(len(areas)), key=lambda k: (-areas[k], k)):
        img[shape_mask(spec.categories[k], spec.rects[k])] = PALETTE[spec.colors[k]]
    return img


def render(spec: SceneSpec) -> np.ndarray:
    return render_uint8(spec).astype(np.float64) / 255.0


# -- blob oracle --------------------------------------------------------------

@dataclass(frozen=True)
class Blob:
    color: str
    rect: tuple[int, int, int, int]  # x, y, w, h in pixels
    area: int


def palette_labels(image: np.ndarray) -> np.ndarray:
    """Index of the nearest palette entry per pixel: 0 background, 1.. COLORS."""
    img = np.asarray(image, dtype=np.float64)
    if img.max() > 1.0 + 1e-9:
        img = img / 255.0
    refs = np.stack([BACKGROUND] + [PALETTE[c] for c in COLORS]).astype(np.float64) / 255.0
    d = ((img[:, :, None, :] - refs[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def detect_blobs(image: np.ndarray, min_area: int = 3) -> list[Blob]:
    labels = palette_labels(image)
    blobs = []
    for ci, color in enumerate(COLORS, start=1):
        comp, n = ndimage.label(labels == ci)
        for k, sl in enumerate(ndimage.find_objects(comp), start=1):
            area = int((comp[sl] == k).sum())
            if area < min_area:
                continue
            ys, xs = sl
            blobs.append(Blob(color, (xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start), area))
    blobs.sort(key=lambda b: (b.rect[1], b.rect[0], b.color))
    return blobs


def box_iou(a, b) -> float:
    ax1, ay1, bx1, by1 = a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax1, bx1) - max(a[0], b[0]))
    ih = max(0.0, min(ay1, by1) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def match_blobs(blobs: Sequence[Blob], boxes_px: Sequence) -> list[tuple[int, int, float]]:
    """One-to-one assignment maximizing IoU; returns (object, blob, iou) with iou > 0."""
    if not blobs or not boxes_px:
        return []
    iou = np.array([[box_iou(b, blob.rect) for blob in blobs] for b in boxes_px])
    rows, cols = linear_sum_assignment(-iou)
    return [(int(r), int(c), float(iou[r, c])) for r, c in zip(rows, cols) if iou[r, c] > 0]


def node_color(node: Node) -> str | None:
    for a in node.attributes:
        if a in PALETTE:
            return a
    return None


def eval_metrics(samples: Sequence[np.ndarray], graphs: Sequence[SceneGraph], min_area: int = 3) -> dict:
    """Blob-oracle scores of images generated under known boxes and colors."""
    ious, correct, matched, count_ok, n_obj = 0.0, 0, 0, 0, 0
    for img, g in zip(samples, graphs):
        blobs = detect_blobs(img, min_area)
        boxes = [tuple(v * GRID for v in b) for b in g.boxes()]
        for obj, bi, iou in match_blobs(blobs, boxes):
            ious += iou
            want = node_color(g.nodes[obj])
            if want is not None:
                matched += 1
                correct += blobs[bi].color == want
        n_obj += len(boxes)
        count_ok += len(blobs) == len(boxes)
    return {
        "layout_iou": ious / n_obj if n_obj else 0.0,
        "attr_acc": correct / matched if matched else 0.0,
        "count_acc": count_ok / len(graphs) if len(graphs) else 0.0,
    }


# -- dataset directory --------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    data = f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()
    atomic_write(path, data)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = raw[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def scene_seed(seed: int, index: int) -> int:
    return int(Rng(seed).split("scene", index).raw(1)[0] >> np.uint64(1))


def write_dataset(out_dir, num: int, seed: int, config: GeneratorConfig | None = None) -> Path:
    cfg = config or GeneratorConfig()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for k in range(num):
        scene = generate_scene(scene_seed(seed, k), cfg)
        atomic_write(out / "scenes" / f"{k:04d}.json",
                     json.dumps(to_dict(scene.graph), indent=1).encode("utf-8"))
        write_ppm(out / "images" / f"{k:04d}.ppm", render_uint8(scene.spec))
    manifest = VOCAB.to_manifest()
    manifest.update({"num_scenes": num, "seed": seed, "config": asdict(cfg), "image_size": GRID})
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"))
    return out


def load_dataset(data_dir) -> tuple[Vocabulary, list[SceneGraph], np.ndarray]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    vocab = Vocabulary.from_manifest(manifest)
    graphs, images = [], []
    for k in range(int(manifest["num_scenes"])):
        graphs.append(from_dict(json.loads((root / "scenes" / f"{k:04d}.json").read_text()), vocab))
        images.append(read_ppm(root / "images" / f"{k:04d}.ppm").astype(np.float64) / 255.0)
    return vocab, graphs, np.stack(images) if images else np.zeros((0, GRID, GRID, 3))
