"""Scikit-learn style front end: fit on (graphs, images), predict images."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import cmadiff as cd
from . import mls, pipeline
from . import synthdata as sd
from .model import ModelBackend
from .scenegraph import Edit, SceneGraph, Vocabulary
from .trainer import TrainConfig, Trainer
from .validation import check_graph, check_graphs, check_images, check_seed


class SceneGraphImageGenerator(BaseEstimator):
    """Scene-graph-to-image generator trained end to end on 16x16 renders.

    ``fit`` trains the embedder, the layout/semantics VAE and the masked
    attention denoiser jointly.  ``predict`` samples one image per graph,
    ``transform`` returns the layouts the VAE proposes for each graph.
    """

    def __init__(self, steps: int = 5000, batch_size: int = 16, lr: float = 1e-4, lr_final: float = 0.0,
                 weight_decay: float = 0.01, cond_dropout: float = cd.COND_DROPOUT, seed: int = 0,
                 sample_steps: int = cd.SAMPLE_STEPS, cfg_scale: float = cd.CFG_SCALE,
                 n_views: int = mls.N_VIEWS, layered: bool = True, eta: float = cd.SAMPLE_ETA):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.weight_decay = weight_decay
        self.cond_dropout = cond_dropout
        self.seed = seed
        self.sample_steps = sample_steps
        self.cfg_scale = cfg_scale
        self.n_views = n_views
        self.layered = layered
        self.eta = eta

    def _train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, lr_final=self.lr_final,
                           weight_decay=self.weight_decay, cond_dropout=self.cond_dropout,
                           seed=check_seed(self.seed))

    def fit(self, graphs, images, vocab: Vocabulary | None = None):
        vocab = vocab or sd.VOCAB
        graphs = check_graphs(graphs, vocab, require_boxes=True)
        images = check_images(images, len(graphs))
        trainer = Trainer(vocab, self._train_config())
        trainer.fit(graphs, images)
        self._set_trainer(trainer)
        return self

    def _set_trainer(self, trainer: Trainer) -> None:
        self.trainer_ = trainer
        self.model_ = trainer.inference_model()
        self.vocab_ = trainer.vocab
        self.loss_curve_ = list(trainer.loss_curve)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "SceneGraphImageGenerator":
        trainer = Trainer.from_checkpoint(path)
        cfg = trainer.config
        est = cls(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, lr_final=cfg.lr_final,
                  weight_decay=cfg.weight_decay, cond_dropout=cfg.cond_dropout, seed=cfg.seed)
        est.set_params(**params)
        est._set_trainer(trainer)
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "trainer_")
        self.trainer_.save(path)

    def transform(self, graphs, seed: int = 0) -> list[np.ndarray]:
        """Boxes decoded from prior latent draws, one (N, 4) array per graph."""
        check_is_fitted(self, "model_")
        graphs = check_graphs(graphs, self.vocab_)
        base = check_seed(seed)
        return [pipeline.prior_view(self.model_, g, base + k)[0] for k, g in enumerate(graphs)]

    def sample(self, graph, seed: int = 0):
        """One image in [0, 1] plus the boxes it was conditioned on and, when layered, the seed state."""
        check_is_fitted(self, "model_")
        g = check_graph(graph, self.vocab_)
        seed = check_seed(seed)
        if self.layered:
            return pipeline.sample_layered(self.model_, g, seed, self.sample_steps, self.cfg_scale,
                                           self.n_views, self.eta)
        img, boxes = pipeline.sample_plain(self.model_, g, seed, self.sample_steps, self.cfg_scale, self.eta)
        return img, boxes, None

    def predict(self, graphs, seed: int = 0) -> np.ndarray:
        graphs = check_graphs(graphs, getattr(self, "vocab_", None))
        base = check_seed(seed)
        return np.stack([self.sample(g, base + k)[0] for k, g in enumerate(graphs)])

    def edit(self, graph: SceneGraph, edit: Edit, state: mls.SeedState):
        """Resample after ``edit`` reusing ``state``; returns (before, after, edited graph, new state)."""
        check_is_fitted(self, "model_")
        g = check_graph(graph, self.vocab_)
        before, after, g2, s2 = mls.edit_and_resample(ModelBackend(self.model_), g, edit, state, self.vocab_,
                                                      self.sample_steps, self.cfg_scale, self.eta)
        return cd.to_image(before), cd.to_image(after), g2, s2

    def score(self, graphs, images=None, seed: int = 0) -> float:
        """Mean of the blob-oracle layout IoU, attribute and count accuracies of fresh samples."""
        check_is_fitted(self, "model_")
        graphs = check_graphs(graphs, self.vocab_)
        m = pipeline.evaluate_samples(self.model_, graphs, seed, self.sample_steps, self.cfg_scale,
                                      self.layered, self.n_views, self.eta)
        return float(np.mean([m["layout_iou"], m["attr_acc"], m["count_acc"]]))
