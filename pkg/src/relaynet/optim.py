"""SGD with momentum, kernel weight decay and a step learning-rate schedule."""

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict

import numpy as np

from .model import is_kernel


class NumericError(FloatingPointError):
    """Raised when a gradient or parameter stops being finite."""


@dataclass
class OptimState:
    momentum: float = 0.9
    base_lr: float = 0.1
    decay_every: int = 30
    decay_factor: float = 0.1
    lambda3: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")


def lr_at(epoch: int, st: OptimState) -> float:
    """``base_lr * decay_factor ** (epoch // decay_every)``.

    Evaluated in decimal so 0.1 decayed twice by 0.1 is the double nearest
    0.001 rather than 0.0010000000000000002.
    """
    k = epoch // st.decay_every
    return float(Decimal(repr(st.base_lr)) * Decimal(repr(st.decay_factor)) ** k)


def step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], st: OptimState,
         lr: float) -> None:
    """One momentum update, in place on ``params`` and ``st.velocity``.

    Kernels get the extra decay gradient ``2 * lambda3 * W``. Nothing is
    modified if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    for name, g in grads.items():
        w = params[name]
        if st.lambda3 and is_kernel(name):
            g = g + 2.0 * st.lambda3 * w
        v = st.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = st.momentum * v - lr * g
        st.velocity[name] = v.astype(w.dtype, copy=False)
        w += st.velocity[name]
