"""scikit-learn compatible wrapper around the network and training loop."""

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import data, metrics, model, training
from .config import PRESETS, RunConfig
from .loss import NUM_CLASSES
from .tensor import DTYPE


def check_images(X) -> np.ndarray:
    """Coerce B-scans to a finite ``(n, 1, H, W)`` float32 array."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images shaped (n, H, W) or (n, 1, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("at least one image is required")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"label maps {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("label maps must hold integer class ids")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= NUM_CLASSES:
        raise ValueError(f"label values must lie in 0..{NUM_CLASSES - 1}")
    return y.astype(np.int64)


class ReLayNetSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel-wise retinal layer and fluid classifier.

    ``fit`` takes B-scans ``X`` of shape ``(n, H, W)`` with intensities in
    [0, 1] and label maps ``y`` of shape ``(n, H, W)``. Training slices each
    scan into ``slice_width`` columns; prediction runs on whole scans.

    Parameters
    ----------
    preset : str or None
        Name of a baseline preset (``"relaynet"``, ``"BL-1"`` ... ``"BL-8"``).
        When given it overrides ``depth``, ``skip_mode`` and the loss toggles.
    depth, channels, kernel, skip_mode
        Network shape.
    lambda1, lambda2, lambda3, use_logistic, use_dice, use_weighting, omega1, omega2
        Loss weights and term switches.
    base_lr, momentum, decay_every, decay_factor
        SGD schedule; the learning rate drops by ``decay_factor`` every
        ``decay_every`` epochs.
    epochs, max_steps, batch_size, slice_width, augment
        Training length and batching. ``max_steps=0`` means no step cap.
    random_state : int
        Seed for initialization, shuffling and augmentation.
    """

    def __init__(self, preset=None, depth=3, channels=64, kernel=(7, 3), skip_mode="full",
                 lambda1=1.0, lambda2=0.5, lambda3=1e-4, use_logistic=True, use_dice=True,
                 use_weighting=True, omega1=10.0, omega2=5.0, base_lr=0.1, momentum=0.9,
                 decay_every=30, decay_factor=0.1, epochs=90, max_steps=0, batch_size=50,
                 slice_width=64, augment=True, random_state=0):
        self.preset = preset
        self.depth = depth
        self.channels = channels
        self.kernel = kernel
        self.skip_mode = skip_mode
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.use_logistic = use_logistic
        self.use_dice = use_dice
        self.use_weighting = use_weighting
        self.omega1 = omega1
        self.omega2 = omega2
        self.base_lr = base_lr
        self.momentum = momentum
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.slice_width = slice_width
        self.augment = augment
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        if not isinstance(self.random_state, numbers.Integral):
            raise ValueError("random_state must be an integer seed")
        values = dict(
            depth=self.depth, channels=self.channels, kernel_h=self.kernel[0],
            kernel_w=self.kernel[1], skip_mode=self.skip_mode, lambda1=self.lambda1,
            lambda2=self.lambda2, lambda3=self.lambda3, use_logistic=self.use_logistic,
            use_dice=self.use_dice, use_weighting=self.use_weighting, omega1=self.omega1,
            omega2=self.omega2, base_lr=self.base_lr, momentum=self.momentum,
            decay_every=self.decay_every, decay_factor=self.decay_factor, epochs=self.epochs,
            max_steps=self.max_steps, batch_size=self.batch_size, slice_width=self.slice_width,
            augment=self.augment, seed=int(self.random_state),
        )
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}")
            values.update(PRESETS[self.preset], preset=self.preset)
        return RunConfig(**values).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = check_label_maps(y, X)
        cfg = self._run_config()
        scans = [data.BScan(X[i:i + 1], y[i]) for i in range(X.shape[0])]
        result = training.fit(scans, cfg)
        self.run_config_ = cfg
        self.config_ = result.config
        self.params_ = result.params
        self.history_ = result.history
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, shape ``(n, 10, H, W)``."""
        check_is_fitted(self, "params_")
        return model.predict(self.params_, self.config_, check_images(X))[1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return model.predict(self.params_, self.config_, check_images(X))[0]

    def score(self, X, y, sample_weight=None) -> float:
        """Mean Dice over the retinal layer and fluid classes."""
        X = check_images(X)
        y = check_label_maps(y, X)
        rep = metrics.report(list(self.predict(X)), list(y))
        return rep.mean_foreground_dice

    def save(self, path):
        check_is_fitted(self, "params_")
        return model.save_checkpoint(path, self.params_, self.config_, seed=self.random_state)

    @classmethod
    def from_checkpoint(cls, path) -> "ReLayNetSegmenter":
        params, config, meta = model.load_checkpoint(path)
        est = cls(depth=config.depth, channels=config.channels, kernel=config.kernel,
                  skip_mode=config.skip_mode, random_state=int(meta.get("seed", 0)))
        est.params_ = params
        est.config_ = config
        est.classes_ = np.arange(NUM_CLASSES)
        return est
