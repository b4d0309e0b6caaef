"""scikit-learn style wrapper around the segmentation network."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import FundusSample
from .metrics import metrics_report
from .network import ModelConfig, build_model
from .training import TrainConfig, predict_proba, train
from .validation import check_divisible, check_images, check_masks


class VesselSegmenter(BaseEstimator):
    """Pixelwise vessel segmenter with ``fit`` / ``predict`` / ``predict_proba``.

    ``X`` is [N,H,W] or [N,C,H,W] in [0, 1]; ``y`` is binary [N,H,W].
    When no validation data is passed, the last ``val_fraction`` of the
    samples is held out for early stopping.
    """

    def __init__(self, variant: str = "fusion", depth: int = 3, base_channels: int = 16,
                 use_bga: bool = True, use_msgf: bool = True, msgf_mode: str = "shared",
                 fusion_mode: str = "serial", routing_iterations: int = 3,
                 batch_size: int = 8, max_epochs: int = 60, patience: int = 10,
                 learning_rate: float = 1e-3, clip_norm: Optional[float] = 1.0,
                 max_seconds: Optional[float] = None, val_fraction: float = 0.2,
                 threshold: float = 0.5, seed: int = 0):
        self.variant = variant
        self.depth = depth
        self.base_channels = base_channels
        self.use_bga = use_bga
        self.use_msgf = use_msgf
        self.msgf_mode = msgf_mode
        self.fusion_mode = fusion_mode
        self.routing_iterations = routing_iterations
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.max_seconds = max_seconds
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.seed = seed

    def _model_config(self, in_channels: int) -> ModelConfig:
        return ModelConfig(
            depth=self.depth, base_channels=self.base_channels, in_channels=in_channels,
            routing_iterations=self.routing_iterations, fusion_mode=self.fusion_mode,
            variant=self.variant, use_bga=self.use_bga, use_msgf=self.use_msgf,
            msgf_mode=self.msgf_mode, seed=self.seed).validate()

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
                           learning_rate=self.learning_rate, clip_norm=self.clip_norm,
                           max_seconds=self.max_seconds, seed=self.seed).validate()

    @staticmethod
    def _samples(X, y, fov) -> list[FundusSample]:
        return [FundusSample(x, t, f, name=f"sample_{i}") for i, (x, t, f) in enumerate(zip(X, y, fov))]

    def fit(self, X, y, fov=None, X_val=None, y_val=None, fov_val=None):
        X = check_images(X)
        check_divisible(X.shape, self.depth)
        y = check_masks(y, (X.shape[0],) + X.shape[2:])
        fov = np.ones_like(y) if fov is None else check_masks(fov, y.shape, "fov")
        if X_val is None:
            if not 0.0 < self.val_fraction < 1.0:
                raise ValueError("val_fraction must lie in (0, 1) when no validation set is given")
            n_val = max(1, int(round(len(X) * self.val_fraction)))
            if n_val >= len(X):
                raise ValueError("need at least two samples to hold out a validation split")
            X, X_val = X[:-n_val], X[-n_val:]
            y, y_val = y[:-n_val], y[-n_val:]
            fov, fov_val = fov[:-n_val], fov[-n_val:]
        else:
            X_val = check_images(X_val, X.shape[1])
            y_val = check_masks(y_val, (X_val.shape[0],) + X_val.shape[2:])
            fov_val = np.ones_like(y_val) if fov_val is None else check_masks(fov_val, y_val.shape, "fov")
        self.model_ = build_model(self._model_config(X.shape[1]))
        result = train(self.model_, self._samples(X, y, fov), self._samples(X_val, y_val, fov_val),
                       self._train_config())
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Vessel probability per pixel, [N,H,W]."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_features_in_)
        check_divisible(X.shape, self.depth)
        return predict_proba(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y, fov=None) -> float:
        """F1 over field-of-view pixels."""
        proba = self.predict_proba(X)
        y = check_masks(y, proba.shape)
        fov = np.ones_like(y) if fov is None else check_masks(fov, y.shape, "fov")
        f1 = metrics_report(proba, y, fov, self.threshold).F1
        return 0.0 if f1 is None else f1
