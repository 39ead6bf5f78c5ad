"""Mini-batch training loop shared by the CLI and the estimator."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import data, loss, model, optim
from .config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: model.Params
    config: model.ModelConfig
    history: List[StepRecord] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.history)


def train_step(params, mc: model.ModelConfig, lc: loss.LossConfig, st: optim.OptimState,
               batch: data.SliceBatch, lr: float) -> float:
    """Forward, composite loss, backward and one optimizer update."""
    probs, cache = model.forward(params, mc, batch.images, mode="train")
    value = loss.combined_loss(probs, batch.onehots, batch.weightmaps, params, lc)
    if not math.isfinite(value):
        raise optim.NumericError(f"loss became non-finite ({value})")
    grad_probs = loss.loss_gradient(probs, batch.onehots, batch.weightmaps, lc)
    grads = model.backward(params, mc, cache, grad_probs)
    optim.step(params, grads, st, lr)
    return value


def fit(scans: Sequence[data.BScan], cfg: RunConfig, params: Optional[model.Params] = None,
        on_epoch_end: Optional[Callable[[int, TrainResult], None]] = None) -> TrainResult:
    """Train on ``scans`` for ``cfg.epochs`` epochs (or ``cfg.max_steps`` steps).

    Everything random is derived from ``cfg.seed``: the initial weights and,
    per epoch, the slice order and augmentations. A :class:`NumericError`
    carries the partial result as ``exc.result``.
    """
    cfg.validate()
    mc, lc, wc = cfg.model_config(), cfg.loss_config(), cfg.weight_config()
    st = cfg.optim_state()
    if params is None:
        params = model.init_params(mc, cfg.seed)
    result = TrainResult(params, mc)
    step = 0
    for epoch in range(cfg.epochs):
        lr = optim.lr_at(epoch, st)
        batches = data.make_batches(
            scans, cfg.slice_width, cfg.batch_size, wc,
            seed=[cfg.seed, epoch], augmentation=cfg.augment,
        )
        epoch_losses = []
        for batch in batches:
            try:
                value = train_step(params, mc, lc, st, batch, lr)
            except optim.NumericError as exc:
                exc.result = result
                raise
            step += 1
            epoch_losses.append(value)
            result.history.append(StepRecord(step, epoch, lr, value))
            if cfg.max_steps and step >= cfg.max_steps:
                break
        result.epoch_losses.append(float(np.mean(epoch_losses)))
        logger.info("epoch %d  lr %.2e  mean loss %.5f", epoch, lr, result.epoch_losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, result)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return result
