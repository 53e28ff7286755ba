"""Test doubles for the layered sampler."""
import numpy as np

from scenecomp import cmadiff as cd
from scenecomp.cmadiff import CallCondition, NoiseModel
from scenecomp.tensorcore import stable_hash


def key_value(key) -> float:
    return (stable_hash(repr(key)) % 1000) / 500.0 - 1.0


class ConstantNoise(NoiseModel):
    """Returns one constant per condition everywhere on the canvas."""

    def __init__(self, shape=(4, 4, 1)):
        self.shape = shape
        self.calls = 0

    def eps(self, z, t, conds):
        self.calls += len(conds)
        return np.stack([np.full(self.shape, key_value(c.key)) for c in conds])


class LocalNoise(NoiseModel):
    """Output inside the call's region depends only on canvas values inside it."""

    region_invariant = False

    def __init__(self, shape=(8, 8, 3)):
        self.shape = shape

    def eps(self, z, t, conds):
        out = []
        for zi, c in zip(z, conds):
            r = c.region[..., None]
            inside = np.where(r, zi, 0.0)
            mean = inside.sum() / max(1, r.sum() * zi.shape[-1])
            val = 0.6 * np.tanh(inside) + 0.2 * mean + 0.3 * key_value(c.key) + 1e-3 * t
            out.append(np.where(r, val, 0.0))
        return np.stack(out)


class DoubleBackend:
    """Layouts follow the graph's boxes, nudged per node by its latent row."""

    latent_dim = 4

    def __init__(self, noise_model, jitter=0.1):
        self.noise_model = noise_model
        self.schedule = cd.NoiseSchedule()
        self.jitter = jitter

    def decode_view(self, g, u):
        boxes = np.array([n.bbox.as_tuple() if n.bbox else (0.3, 0.3, 0.3, 0.3) for n in g.nodes],
                         dtype=np.float64).reshape(-1, 4)
        u = np.asarray(u)
        boxes[:, 0] = np.clip(boxes[:, 0] + self.jitter * np.tanh(u[:, 0]), 0, 1 - boxes[:, 2])
        boxes[:, 1] = np.clip(boxes[:, 1] + self.jitter * np.tanh(u[:, 1]), 0, 1 - boxes[:, 3])
        return boxes, np.tanh(u)

    def object_condition(self, g, i, box, sem_row, region=None):
        node = g.nodes[i]
        return CallCondition(("obj", node.category, node.attributes), region=region)

    def null_condition(self, region=None):
        return CallCondition(("null",), region=region)
