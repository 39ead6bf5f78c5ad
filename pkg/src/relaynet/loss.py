"""Composite training objective: weighted logistic loss, soft Dice loss,
pixel weight maps and their analytic gradients w.r.t. the probabilities."""

from dataclasses import dataclass, field
from typing import FrozenSet

import numpy as np

from .model import is_kernel
from .tensor import ShapeError

NUM_CLASSES = 10
PROB_FLOOR = 1e-7
DICE_EPS = 1e-7

# every class except the two background regions (RaR = 0, RbR = 8)
DEFAULT_BOOSTED = frozenset({1, 2, 3, 4, 5, 6, 7, 9})


@dataclass(frozen=True)
class WeightConfig:
    omega1: float = 10.0
    omega2: float = 5.0
    boosted_classes: FrozenSet[int] = field(default=DEFAULT_BOOSTED)

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("omega1 and omega2 must be non-negative")
        object.__setattr__(self, "boosted_classes", frozenset(int(c) for c in self.boosted_classes))
        if not self.boosted_classes <= set(range(NUM_CLASSES)):
            raise ValueError(f"boosted classes must be within 0..{NUM_CLASSES - 1}")


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and term toggles.

    ``reduction="mean"`` divides the logistic term by the pixel count of each
    item; ``"sum"`` keeps the plain pixel sum. Both average over the batch.
    """

    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 1e-4
    use_logistic: bool = True
    use_dice: bool = True
    use_weighting: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (self.use_logistic or self.use_dice):
            raise ValueError("at least one of the logistic and Dice terms must be enabled")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    """``(B, H, W)`` or ``(H, W)`` labels to a ``(B, K, H, W)`` one-hot tensor."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    classes = np.arange(num_classes).reshape(1, -1, 1, 1)
    return (labels[:, None] == classes).astype(dtype)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True where any 4-neighbour carries a different label."""
    labels = np.asarray(labels)
    mask = np.zeros(labels.shape, dtype=bool)
    diff_v = labels[..., 1:, :] != labels[..., :-1, :]
    diff_h = labels[..., :, 1:] != labels[..., :, :-1]
    mask[..., 1:, :] |= diff_v
    mask[..., :-1, :] |= diff_v
    mask[..., :, 1:] |= diff_h
    mask[..., :, :-1] |= diff_h
    return mask


def weight_map(labels: np.ndarray, wc: WeightConfig = WeightConfig()) -> np.ndarray:
    """Pixel weights ``1 + omega1*[boundary] + omega2*[boosted class]``.

    Returns ``(B, 1, H, W)`` float32 for ``(B, H, W)`` or ``(H, W)`` labels.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    boosted = np.isin(labels, sorted(wc.boosted_classes))
    w = 1.0 + wc.omega1 * boundary_mask(labels) + wc.omega2 * boosted
    return w[:, None].astype(np.float32)


def _check(probs, onehot, weights=None):
    if probs.shape != onehot.shape:
        raise ShapeError(f"probs {probs.shape} and onehot {onehot.shape} differ")
    if weights is not None:
        b, _, h, w = probs.shape
        if weights.shape != (b, 1, h, w):
            raise ShapeError(f"weights {weights.shape} do not match probs {probs.shape}")


def _pixel_norm(probs, reduction):
    b, _, h, w = probs.shape
    return b * (h * w if reduction == "mean" else 1)


def logistic_loss(probs, onehot, weights, reduction: str = "mean") -> float:
    """``-sum_x w(x) log p_true(x)`` per item, averaged over the batch.

    With ``reduction="mean"`` each item's sum is also divided by its pixel
    count.
    """
    _check(probs, onehot, weights)
    p_true = np.maximum((probs * onehot).sum(axis=1, keepdims=True), PROB_FLOOR)
    total = -(weights * np.log(p_true)).sum()
    return float(total / _pixel_norm(probs, reduction))


def logistic_gradient(probs, onehot, weights, reduction: str = "mean") -> np.ndarray:
    """``-w(x) g_l(x) / p_l(x)``, with the same batch/pixel normalisation."""
    _check(probs, onehot, weights)
    grad = -weights * onehot / np.maximum(probs, PROB_FLOOR)
    return grad / _pixel_norm(probs, reduction)


def _dice_terms(probs, onehot):
    inter = (probs * onehot).sum(axis=(2, 3))
    denom = (probs ** 2).sum(axis=(2, 3)) + (onehot ** 2).sum(axis=(2, 3))
    return inter, denom


def dice_loss(probs, onehot) -> float:
    """Soft Dice loss averaged over classes and batch items.

    A class with no truth pixels and no predicted mass contributes 0.
    """
    _check(probs, onehot)
    inter, denom = _dice_terms(probs, onehot)
    empty = denom < DICE_EPS
    per_class = np.where(empty, 0.0, 1.0 - 2.0 * inter / np.maximum(denom, DICE_EPS))
    return float(per_class.mean())


def dice_gradient(probs, onehot) -> np.ndarray:
    _check(probs, onehot)
    b, k = probs.shape[:2]
    inter, denom = _dice_terms(probs, onehot)
    empty = (denom < DICE_EPS)[:, :, None, None]
    inter = inter[:, :, None, None]
    denom = np.maximum(denom, DICE_EPS)[:, :, None, None]
    grad = -2.0 * (onehot * denom - 2.0 * probs * inter) / denom ** 2
    grad = np.where(empty, 0.0, grad)
    return (grad / (b * k)).astype(probs.dtype, copy=False)


def _effective_weights(weights, lc: LossConfig):
    return weights if lc.use_weighting else np.ones_like(weights)


def loss_gradient(probs, onehot, weights, lc: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of the data terms of :func:`combined_loss` w.r.t. ``probs``.

    Weight decay is applied by the optimizer, not here.
    """
    _check(probs, onehot, weights)
    grad = np.zeros_like(probs)
    if lc.use_logistic:
        w = _effective_weights(weights, lc)
        grad = grad + lc.lambda1 * logistic_gradient(probs, onehot, w, lc.reduction)
    if lc.use_dice:
        grad = grad + lc.lambda2 * dice_gradient(probs, onehot)
    return grad.astype(probs.dtype, copy=False)


def kernel_norm(params) -> float:
    """Sum of squared entries of every convolution kernel."""
    return float(sum(np.sum(np.square(v, dtype=np.float64)) for k, v in params.items() if is_kernel(k)))


def combined_loss(probs, onehot, weights, params=None, lc: LossConfig = LossConfig()) -> float:
    total = 0.0
    if lc.use_logistic:
        w = _effective_weights(weights, lc)
        total += lc.lambda1 * logistic_loss(probs, onehot, w, lc.reduction)
    if lc.use_dice:
        total += lc.lambda2 * dice_loss(probs, onehot)
    if params is not None and lc.lambda3:
        total += lc.lambda3 * kernel_norm(params)
    return total
