"""Parameter containers and the handful of layers the models are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, scale: float = 1.0):
        self.weight = parameter(rng.normal((d_in, d_out)) * (scale / np.sqrt(d_in)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Linear layers with SiLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: Rng, last_scale: float = 1.0):
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng.split("layer", i),
                              scale=last_scale if i == n - 1 else 1.0) for i in range(n)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.silu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: Rng, scale: float = 1.0):
        self.table = parameter(rng.normal((n, dim)) * scale)

    def __call__(self, idx):
        return T.take(self.table, idx)
