"""scikit-learn style wrappers around the U-Net and the marker inpainter.

``UNetSegmenter`` is an estimator (``fit`` / ``predict`` / ``predict_proba`` /
``score``) over image stacks ``X`` of shape [N,C,H,W] and mask stacks ``y`` of
shape [N,H,W].  ``MarkerInpainter`` is a stateless transformer, so the
marker-mitigated model is simply::

    make_pipeline(MarkerInpainter(), UNetSegmenter(...))
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import MarkerColorSpec, detect_markers, inpaint_markers
from .errors import DomainError, UsageError
from .metrics import dice
from .segnet import (
    PaddingMode,
    SegModel,
    TrainSchedule,
    UNetConfig,
    init_unet,
    predict_mask,
    predict_proba,
    train,
)


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Validate an image stack and return it as float32 [N,C,H,W]."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise UsageError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3 and channels in (None, 1):
        X = X[:, None]
    if X.ndim != 4:
        raise UsageError(f"images must have shape [N,C,H,W], got {X.shape}")
    if len(X) == 0:
        raise UsageError("image stack is empty")
    if channels is not None and X.shape[1] != channels:
        raise UsageError(f"expected {channels} channel(s), got {X.shape[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise DomainError("images contain NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray | None = None) -> np.ndarray:
    """Validate a mask stack (binary or {0,1}-valued) and return it as bool [N,H,W]."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise UsageError(f"masks must have shape [N,H,W], got {y.shape}")
    if y.dtype != bool:
        if not np.isin(y, (0, 1)).all():
            raise DomainError("masks must be binary (0/1)")
        y = y.astype(bool)
    if X is not None and (len(y) != len(X) or y.shape[1:] != X.shape[2:]):
        raise UsageError(f"masks {y.shape} do not match images {X.shape}")
    return y


class UNetSegmenter(BaseEstimator):
    """U-Net trained with soft Dice and Adam.

    Parameters mirror :class:`UNetConfig` and :class:`TrainSchedule`.  The
    number of input channels is taken from the data at ``fit`` time.
    ``validation_fraction`` of the training images (seeded) is held out and
    scored after every epoch (``history_.val_dice``); the final weights are
    always those of the last epoch.
    """

    def __init__(self, depth=3, base_channels=16, padding_mode="zeros", learning_rate=1e-3,
                 epochs=30, batch_size=16, augmentation="none", crop_scale=(0.5, 1.0),
                 optimizer="adam", weight_decay=0.0, lr_schedule="constant",
                 validation_fraction=0.0, threshold=0.5, random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.padding_mode = padding_mode
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.augmentation = augmentation
        self.crop_scale = crop_scale
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _config(self, channels: int) -> UNetConfig:
        return UNetConfig(in_channels=channels, depth=self.depth, base_channels=self.base_channels,
                          padding_mode=PaddingMode.parse(self.padding_mode))

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.random_state + 3, augmentation=self.augmentation,
                             crop_scale=tuple(self.crop_scale), augment_seed=self.random_state + 4,
                             optimizer=self.optimizer, weight_decay=self.weight_decay,
                             lr_schedule=self.lr_schedule)

    def fit(self, X, y, progress=None):
        X = check_images(X)
        y = check_masks(y, X)
        if not 0 <= self.validation_fraction < 1:
            raise UsageError("validation_fraction must be in [0, 1)")
        n_val = int(round(len(X) * self.validation_fraction))
        if n_val:
            order = np.random.default_rng(self.random_state + 1).permutation(len(X))
            val = (X[order[:n_val]], y[order[:n_val]])
            X, y = X[order[n_val:]], y[order[n_val:]]
        else:
            val = None
        model = init_unet(self._config(X.shape[1]), seed=self.random_state + 2)
        self.model_, self.history_ = train(model, (X, y), val, self._schedule(), progress=progress)
        self.n_features_in_ = int(X.shape[1])
        return self

    @classmethod
    def from_model(cls, model: SegModel, **params) -> "UNetSegmenter":
        """Wrap an already trained :class:`SegModel`."""
        cfg = model.config
        est = cls(depth=cfg.depth, base_channels=cfg.base_channels, padding_mode=cfg.padding_mode.value, **params)
        est.model_ = model
        est.history_ = None
        est.n_features_in_ = cfg.in_channels
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X, self.n_features_in_))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_mask(self.model_, check_images(X, self.n_features_in_), threshold=self.threshold)

    def score(self, X, y) -> float:
        """Mean per-image Dice."""
        X = check_images(X)
        y = check_masks(y, X)
        return float(np.mean([dice(p, g) for p, g in zip(self.predict(X), y)]))


class MarkerInpainter(TransformerMixin, BaseEstimator):
    """Detect marker-colored pixels and fill them from the surrounding image."""

    def __init__(self, color=(1.0, 0.85, 0.1), tolerance=0.15, gray_threshold=0.98, dilate=True):
        self.color = color
        self.tolerance = tolerance
        self.gray_threshold = gray_threshold
        self.dilate = dilate

    def _spec(self) -> MarkerColorSpec:
        return MarkerColorSpec(tuple(self.color), self.tolerance, self.gray_threshold)

    def fit(self, X, y=None):
        X = check_images(X)
        self._spec()
        self.n_features_in_ = int(X.shape[1])
        return self

    def transform(self, X) -> np.ndarray:
        X = check_images(X)
        spec = self._spec()
        return np.stack([inpaint_markers(im, detect_markers(im, spec, self.dilate)) for im in X])

    def detect(self, X) -> np.ndarray:
        X = check_images(X)
        spec = self._spec()
        return np.stack([detect_markers(im, spec, self.dilate) for im in X])
