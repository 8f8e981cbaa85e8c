"""scikit-learn style wrapper around the hourglass detector."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import hourglass
from .froc import froc_curve, operating_point
from .hourglass import HourglassConfig
from .loss import LossConfig, ReferenceBank
from .peaks import Peak, PeakParams, find_peaks
from .pipeline import predict_heatmaps
from .trainer import TrainConfig, Trainer, variant_config
from .validation import check_annotations, check_images


class HeatmapDetector(BaseEstimator):
    """Blob-heatmap detector trained with the hypersensitive loss.

    ``X`` is a stack of grayscale images ``[N, H, W]`` in [0, 1]; ``y`` is one
    list of :class:`~blobsense.annotation.Annotation` (or dicts) per image.

    ``transform`` returns heatmaps, ``predict`` returns peaks above
    ``threshold`` and ``score`` is the sensitivity at the best operating point
    with at most ``max_fpi`` false positives per image.
    """

    def __init__(self, stacks=1, depth=3, channels=16, learning_rate=1e-4, phase1_epochs=2, phase1_steps=500,
                 crop_size=64, epochs=8, images_per_epoch=500, patch_size=33, sigmas=(1.5, 3.0, 6.0), k=3,
                 omega=0.01, variant="full", threshold=0.5, nms_window=3, max_fpi=5.0, n_threads=1,
                 random_state=0):
        self.stacks = stacks
        self.depth = depth
        self.channels = channels
        self.learning_rate = learning_rate
        self.phase1_epochs = phase1_epochs
        self.phase1_steps = phase1_steps
        self.crop_size = crop_size
        self.epochs = epochs
        self.images_per_epoch = images_per_epoch
        self.patch_size = patch_size
        self.sigmas = sigmas
        self.k = k
        self.omega = omega
        self.variant = variant
        self.threshold = threshold
        self.nms_window = nms_window
        self.max_fpi = max_fpi
        self.n_threads = n_threads
        self.random_state = random_state

    # configs derived from the flat parameter set
    def _model_config(self) -> HourglassConfig:
        return HourglassConfig(stacks=self.stacks, depth=self.depth, channels=self.channels,
                               seed=int(self.random_state)).validate()

    def _train_config(self) -> TrainConfig:
        loss = LossConfig(patch_size=self.patch_size, bank=ReferenceBank(tuple(self.sigmas)), k=self.k,
                          omega=self.omega, nms_window=self.nms_window)
        cfg = TrainConfig(learning_rate=self.learning_rate, phase1_epochs=self.phase1_epochs,
                          phase1_steps=self.phase1_steps, crop_size=self.crop_size, epochs=self.epochs,
                          images_per_epoch=self.images_per_epoch, loss=loss, seed=int(self.random_state))
        return variant_config(cfg, self.variant).validate()

    def _peak_params(self) -> PeakParams:
        return PeakParams(self.threshold, self.nms_window)

    def fit(self, X, y):
        model_cfg = self._model_config()
        X = check_images(X, model_cfg.multiple)
        y = check_annotations(y, len(X), X.shape[1:])
        self.train_config_ = self._train_config()
        trainer = Trainer(hourglass.build(model_cfg), X, y, self.train_config_)
        trainer.fit()
        self.model_ = trainer.model
        self.trace_ = list(trainer.trace)
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "HeatmapDetector":
        """Wrap a saved model; hourglass geometry comes from the checkpoint."""
        model, _, _ = hourglass.load(path)
        cfg = model.config
        est = cls(stacks=cfg.stacks, depth=cfg.depth, channels=cfg.channels, **params)
        est.model_ = model
        return est

    def decision_function(self, X) -> np.ndarray:
        """Heatmaps ``[N, H, W]`` with values in (0, 1)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.multiple)
        return np.stack(predict_heatmaps(self.model_, X, int(self.n_threads)))

    transform = decision_function

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def predict(self, X) -> List[List[Peak]]:
        """Peaks per image, sorted by descending confidence."""
        params = self._peak_params()
        return [find_peaks(h, params) for h in self.decision_function(X)]

    def froc(self, X, y, thresholds: Optional[Sequence[float]] = None):
        heatmaps = self.decision_function(X)
        y = check_annotations(y, len(heatmaps), heatmaps.shape[1:])
        return froc_curve(list(heatmaps), y, thresholds, PeakParams(0.0, self.nms_window))

    def score(self, X, y) -> float:
        op = operating_point(self.froc(X, y), self.max_fpi)
        return 0.0 if op is None else float(op.sensitivity)
