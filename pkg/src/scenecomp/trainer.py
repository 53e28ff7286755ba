"""Joint optimization, checkpoint files, and the gradient audit."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cmadiff as cd
from . import synthdata as sd
from .model import ModelConfig, SceneDiffusionModel
from .scenegraph import SceneGraph, Vocabulary, to_dict
from .tensorcore import NonFiniteError, Rng, Tensor

log = logging.getLogger(__name__)

MAGIC = b"DISCO001"
MAGIC_PREFIX = b"DISCO"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    lr_final: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    loss_weights: tuple[float, float, float] = (1.0, 0.1, 1.0)
    cond_dropout: float = cd.COND_DROPOUT
    T: int = cd.T_STEPS
    beta_start: float = cd.BETA_START
    beta_end: float = cd.BETA_END
    n_max: int = 8
    gcn_layers: int = 2
    denoiser_blocks: int = 2
    seed: int = 0
    log_every: int = 50
    ema_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        positive = ("batch_size", "lr", "clip_norm", "T", "n_max", "gcn_layers", "denoiser_blocks", "log_every")
        bad = [f for f in positive if not getattr(self, f) > 0]
        if self.steps < 0:
            bad.append("steps")
        if not 0 <= self.cond_dropout < 1:
            bad.append("cond_dropout")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            bad.append("loss_weights")
        if not 0 <= self.lr_final <= self.lr:
            bad.append("lr_final")
        if not 0 <= self.ema_decay < 1:
            bad.append("ema_decay")
        if bad:
            raise ValueError(f"invalid training config fields: {', '.join(bad)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    def model_config(self) -> ModelConfig:
        return ModelConfig(seed=self.seed, n_max=self.n_max, gcn_layers=self.gcn_layers,
                           denoiser_blocks=self.denoiser_blocks, T=self.T,
                           beta_start=self.beta_start, beta_end=self.beta_end)

    def lr_at(self, step: int) -> float:
        """Linear decay from ``lr`` at step 0 to ``lr_final`` at the last step."""
        frac = step / max(1, self.steps)
        return self.lr + (self.lr_final - self.lr) * frac


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = named_params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- checkpoint files --------------------------------------------------------------

def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:len(MAGIC_PREFIX)] == MAGIC_PREFIX and data[:8] != MAGIC:
        raise CheckpointVersionError(f"checkpoint version {data[5:8]!r} is not supported (expected {MAGIC[5:]!r})")
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        (n,) = struct.unpack("<H", take(2, f"name length of tensor #{k}"))
        name = take(n, f"name of tensor #{k}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of {name}"))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8")
        tensors[name] = values.reshape(shape).astype(np.float64)
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        meta = json.loads(take(n, "config").decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"checkpoint config is not valid JSON: {exc}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint config")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format_version {meta.get('format_version')!r}, "
                                     f"expected {FORMAT_VERSION}")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    sd.atomic_write(path, encode_checkpoint(tensors, {**meta, "format_version": FORMAT_VERSION}))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


# -- training ------------------------------------------------------------------------

def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(seed).split("epoch", epoch).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Indices of the scenes used at ``step``: consecutive slices of per-epoch shuffles."""
    start = step * batch_size
    idx = []
    for pos in range(start, start + batch_size):
        epoch, k = divmod(pos, n)
        idx.append(epoch_order(seed, epoch, n)[k])
    return np.array(idx)


class Trainer:
    def __init__(self, vocab: Vocabulary, config: TrainConfig, model: SceneDiffusionModel | None = None):
        self.config = config
        self.model = model or SceneDiffusionModel(vocab, config.model_config())
        self.params = dict(self.model.named_parameters())
        self.opt = AdamW(self.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        self.step = 0
        self.loss_curve: list[dict] = []
        self.ema = {k: p.data.copy() for k, p in self.params.items()} if config.ema_decay > 0 else None

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab

    def compute_losses(self, graphs, images, step: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = Rng(cfg.seed).split("step", step)
        return self.model.losses(graphs, images, rng, cfg.cond_dropout, cfg.loss_weights)

    def train_step(self, graphs: Sequence[SceneGraph], images: np.ndarray, dump_dir=None) -> dict[str, float]:
        cfg = self.config
        self.model.zero_grad()
        try:
            losses = self.compute_losses(graphs, images, self.step)
            total = losses["total"]
            if not np.isfinite(total.item()):
                raise NonFiniteError("total_loss")
            total.backward()
        except NonFiniteError as exc:
            where = self._dump(graphs, images, dump_dir, str(exc))
            raise TrainingError(f"non-finite value at step {self.step} ({exc}); batch written to {where}") from exc
        grad_norm = clip_gradients(list(self.params.values()), cfg.clip_norm)
        self.opt.step(cfg.lr_at(self.step))
        self.step += 1
        if self.ema is not None:
            # short warm-up so early averages are not dominated by the initialization
            d = min(cfg.ema_decay, (1.0 + self.step) / (10.0 + self.step))
            for k, p in self.params.items():
                self.ema[k] = d * self.ema[k] + (1.0 - d) * p.data
        row = {k: v.item() for k, v in losses.items()}
        row["grad_norm"] = grad_norm
        return row

    def _dump(self, graphs, images, dump_dir, reason: str) -> str:
        out = Path(dump_dir or ".") / f"nonfinite_step{self.step}.json"
        doc = {"step": self.step, "reason": reason, "graphs": [to_dict(g) for g in graphs],
               "images": np.asarray(images).tolist()}
        sd.atomic_write(out, json.dumps(doc).encode("utf-8"))
        return str(out)

    def fit(self, graphs: Sequence[SceneGraph], images: np.ndarray, steps: int | None = None,
            callback: Callable[[int, dict], None] | None = None, dump_dir=None) -> list[dict]:
        """Run until ``steps`` (default: the configured total) optimizer steps are done."""
        cfg = self.config
        target = cfg.steps if steps is None else steps
        n = len(graphs)
        if n == 0:
            raise ValueError("empty dataset")
        images = np.asarray(images, dtype=np.float64)
        running = []
        while self.step < target:
            idx = batch_indices(cfg.seed, self.step, min(cfg.batch_size, n), n)
            row = self.train_step([graphs[i] for i in idx], images[idx], dump_dir)
            running.append(row)
            if self.step % cfg.log_every == 0 or self.step == target:
                avg = {k: float(np.mean([r[k] for r in running])) for k in running[0]}
                avg["step"] = self.step
                self.loss_curve.append(avg)
                log.info("step %d total %.4f ldm %.4f layout %.4f kl %.4f", self.step, avg["total"],
                         avg["ldm"], avg["layout"], avg["union"])
                running = []
                if callback is not None:
                    callback(self.step, avg)
        return self.loss_curve

    # -- persistence -----------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": p.data for k, p in self.params.items()}
        out.update({f"adam.m/{k}": v for k, v in self.opt.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.opt.v.items()})
        if self.ema is not None:
            out.update({f"ema/{k}": v for k, v in self.ema.items()})
        return out

    def inference_model(self) -> SceneDiffusionModel:
        """The model to sample from: averaged weights when EMA is on, else the live weights."""
        if self.ema is None:
            return self.model
        model = SceneDiffusionModel(self.vocab, self.model.config)
        for k, p in model.named_parameters():
            p.data = self.ema[k].copy()
        return model

    def meta(self) -> dict:
        return {"train_config": self.config.to_dict(), "model_config": self.model.config.to_dict(),
                "vocab": self.vocab.to_manifest(), "step": self.step, "adam_t": self.opt.t,
                "rng_state": Rng(self.config.seed).split("step", self.step).get_state(),
                "loss_curve": self.loss_curve}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_tensors(), self.meta())

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        return cls.from_state(tensors, meta)

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], meta: dict) -> "Trainer":
        try:
            cfg = TrainConfig.from_dict(meta["train_config"])
            vocab = Vocabulary.from_manifest(meta["vocab"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint config unusable: {exc}") from exc
        tr = cls(vocab, cfg)
        expected = tr.state_tensors()
        for name, arr in expected.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensors, e.g. {extra[0]!r}")
        for k, p in tr.params.items():
            p.data = tensors[f"model/{k}"].copy()
            tr.opt.m[k] = tensors[f"adam.m/{k}"].copy()
            tr.opt.v[k] = tensors[f"adam.v/{k}"].copy()
            if tr.ema is not None:
                tr.ema[k] = tensors[f"ema/{k}"].copy()
        tr.step = int(meta.get("step", 0))
        tr.opt.t = int(meta.get("adam_t", 0))
        tr.loss_curve = list(meta.get("loss_curve", []))
        return tr


def load_model(path) -> SceneDiffusionModel:
    return Trainer.from_checkpoint(path).inference_model()


# -- gradient audit -------------------------------------------------------------------

AUDIT_GROUPS = (
    ("embedder tables", ("embedder.category_table", "embedder.predicate_table", "embedder.attribute_table",
                         "embedder.attribute_null", "embedder.box_encoder")),
    ("union encoder", ("slvae.encoder_layers",)),
    ("mu head", ("slvae.mu_head",)),
    ("sigma head", ("slvae.log_sigma_head",)),
    ("layout decoder", ("slvae.layout_decoder",)),
    ("semantic decoder", ("slvae.semantic_decoder",)),
    ("tokenizer", ("tokenizer",)),
    ("cma projections", ("denoiser.blocks.0.cma.proj", "denoiser.blocks.1.cma.proj")),
    ("denoiser blocks", ("denoiser",)),
)


def gradient_audit(model: SceneDiffusionModel, graphs, images, rng: Rng) -> dict:
    """Gradient norm per parameter group and the list of tensors with an all-zero gradient.

    The denoiser's output layer starts at zero, which would block every
    gradient into the denoiser on the very first batch, so the audit runs
    with a small random output layer.
    """
    out = model.denoiser.out.weight
    saved = out.data
    if not np.any(saved):
        out.data = rng.split("audit-head").normal(saved.shape) * 0.02
    try:
        model.zero_grad()
        model.losses(graphs, images, rng, dropout=0.0)["total"].backward()
        named = dict(model.named_parameters())
        zero = [k for k, p in named.items() if p.grad is None or not np.any(p.grad)]
        groups = {}
        for label, prefixes in AUDIT_GROUPS:
            keys = [k for k in named if any(k.startswith(p) for p in prefixes)]
            groups[label] = float(np.sqrt(sum(float((named[k].grad ** 2).sum()) for k in keys
                                              if named[k].grad is not None)))
        return {"groups": groups, "zero_grad_tensors": zero, "n_tensors": len(named)}
    finally:
        out.data = saved
        model.zero_grad()
