"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import json
from typing import Iterable

import numpy as np

from .scenegraph import N_MAX, SceneGraph, SceneGraphError, Vocabulary, from_dict, parse_scene_graph, validate

IMAGE_SHAPE = (16, 16, 3)


class ValidationError(ValueError):
    pass


def check_graph(g, vocab: Vocabulary | None = None, require_boxes: bool = False, n_max: int = N_MAX) -> SceneGraph:
    """Accept a SceneGraph, a dict, or JSON text/bytes; return a validated SceneGraph."""
    try:
        if isinstance(g, SceneGraph):
            g = validate(g, vocab, n_max)
        elif isinstance(g, dict):
            g = from_dict(g, vocab, n_max)
        elif isinstance(g, (str, bytes)):
            g = parse_scene_graph(g, vocab, n_max)
        else:
            raise ValidationError(f"expected a scene graph, got {type(g).__name__}")
    except SceneGraphError as exc:
        raise ValidationError(str(exc)) from exc
    if require_boxes and not g.has_boxes:
        raise ValidationError("every node needs a bbox for training")
    return g


def check_graphs(graphs: Iterable, vocab: Vocabulary | None = None, require_boxes: bool = False,
                 n_max: int = N_MAX) -> list[SceneGraph]:
    if isinstance(graphs, (SceneGraph, dict, str, bytes)):
        raise ValidationError("expected a sequence of scene graphs")
    out = [check_graph(g, vocab, require_boxes, n_max) for g in graphs]
    if not out:
        raise ValidationError("no scene graphs given")
    return out


def check_images(images, n: int | None = None) -> np.ndarray:
    """Return float64 images in [0, 1] of shape (n, 16, 16, 3); uint8 input is rescaled."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    elif not np.issubdtype(arr.dtype, np.number):
        raise ValidationError(f"images must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float64)
    if arr.ndim != 4 or arr.shape[1:] != IMAGE_SHAPE:
        raise ValidationError(f"images must have shape (n, 16, 16, 3), got {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValidationError(f"{arr.shape[0]} images for {n} scene graphs")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("image values must be finite and within [0, 1]")
    return arr


def check_seed(seed) -> int:
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValidationError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def load_json_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
