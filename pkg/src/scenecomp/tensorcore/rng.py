"""Counter-based, splittable random streams.

Raw 64-bit words come from Philox-4x64-10 (numpy's ``Philox`` bit
generator, whose output stream is fixed across platforms and releases).
Everything above the raw words is done here so the full pipeline is
pinned:

* uniform: ``(word >> 11) * 2**-53``, giving doubles in [0, 1).
* normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)`` then the matching ``sin`` term.
* split: the child key is the first 16 bytes of
  ``sha256(parent_key || repr(labels))``.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

_TWO_NEG53 = 1.0 / (1 << 53)


def _key_from_bytes(raw: bytes) -> np.ndarray:
    digest = hashlib.sha256(raw).digest()
    return np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)


def stable_hash(text: str) -> int:
    """A 63-bit hash of ``text`` that does not depend on PYTHONHASHSEED."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


class Rng:
    def __init__(self, seed: int = 0, *, _key: np.ndarray | None = None):
        self.seed = int(seed)
        self.key = _key if _key is not None else _key_from_bytes(b"rng-seed:" + str(self.seed).encode())
        self._bits = np.random.Philox(key=self.key)

    def split(self, *labels) -> "Rng":
        """Independent child stream addressed by ``labels``; does not advance self."""
        raw = self.key.tobytes() + repr(tuple(labels)).encode("utf-8")
        return Rng(self.seed, _key=_key_from_bytes(raw))

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = math.prod(shape) if isinstance(shape, (tuple, list)) else int(shape)
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = math.prod(shape) if isinstance(shape, (tuple, list)) else int(shape)
        m = (n + 1) // 2
        u = self.uniform((m, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by scaling a uniform draw."""
        u = self.uniform(shape)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def choice(self, seq):
        return seq[int(self.integers(0, len(seq)))]

    # -- persistence -----------------------------------------------------
    def get_state(self) -> dict:
        st = self._bits.state
        return {
            "seed": self.seed,
            "key": [int(k) for k in self.key],
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], _key=np.array(state["key"], dtype=np.uint64))
        rng._bits.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(state["counter"], dtype=np.uint64),
                      "key": np.array(state["key"], dtype=np.uint64)},
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng
