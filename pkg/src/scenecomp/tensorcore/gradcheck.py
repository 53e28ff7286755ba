from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place).

    ``entries`` restricts the work to those flat indices; others stay 0.
    """
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check")
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable, x, h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar Tensor.  ``x`` is an array, a Tensor, or a
    sequence of Tensors; in the sequence case ``f`` is called with no
    arguments and the tensors are treated as its free parameters.
    With ``max_entries`` only that many randomly chosen coordinates per
    tensor are compared.
    """
    if isinstance(x, Sequence) and not isinstance(x, np.ndarray):
        params = list(x)
        call = f
    else:
        t = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
        params = [t]
        call = lambda: f(t)  # noqa: E731
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = call()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = np.sort(rng.choice(p.data.size, max_entries, replace=False))
        numeric = numeric_grad(call, p, h, entries)
        if entries is not None:
            analytic, numeric = analytic.reshape(-1)[entries], numeric.reshape(-1)[entries]
        if numeric.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
