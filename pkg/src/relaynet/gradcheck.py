"""Central finite-difference checks for every backward pass.

Each check builds a random scalar objective around one operation, computes
the analytic gradient with the matching backward function and compares it
entry by entry against central differences of the forward function.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import layers, loss, model
from .tensor import concat_channels, split_channels

LAYER_TOL = 1e-3
NETWORK_TOL = 1e-2
LAYER_STEP = 1e-2
NETWORK_STEP = 1e-5
# Entries whose magnitude is below this are compared absolutely.
ABS_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_rel_error:.3e}  (tol {self.tolerance:.0e})"


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct_windows(rng, shape, gap=0.05):
    """Values whose entries differ pairwise by at least ``gap``."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * gap - n * gap / 2).astype(np.float64)


class _Corruptor:
    def __init__(self, target: Optional[str]):
        self.target = target

    def __call__(self, name: str, grad: np.ndarray) -> np.ndarray:
        if self.target is not None and name.startswith(self.target):
            return grad * 1.05 + 1e-3
        return grad


def check_layers(seed: int = 0, shape: Sequence[int] = (2, 4, 12, 8),
                 corrupt: Optional[str] = None) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    c = _Corruptor(corrupt)
    b, ch, h, w = shape
    results = []

    def add(name, analytic, numeric, tol=LAYER_TOL):
        results.append(CheckResult(name, relative_error(c(name, analytic), numeric), tol))

    # conv
    x = rng.standard_normal(shape)
    p = layers.ConvParams(rng.standard_normal((3, ch, 7, 3)) * 0.3, rng.standard_normal(3))
    out, cache = layers.conv2d_forward(x, p)
    g = rng.standard_normal(out.shape)
    gx, gw, gb = layers.conv2d_backward(g, cache, p)
    obj = lambda: float((layers.conv2d_forward(x, p)[0] * g).sum())
    add("conv2d.input", gx, numeric_gradient(obj, x, LAYER_STEP))
    add("conv2d.weight", gw, numeric_gradient(obj, p.weight, LAYER_STEP))
    add("conv2d.bias", gb, numeric_gradient(obj, p.bias, LAYER_STEP))

    # batchnorm, both modes
    x = rng.standard_normal(shape) * 2 + 0.5
    bn = layers.BatchNormParams(
        rng.uniform(0.5, 1.5, ch), rng.standard_normal(ch),
        rng.standard_normal(ch), rng.uniform(0.5, 2.0, ch),
    )
    for mode in ("train", "infer"):
        out, cache = layers.batchnorm_forward(x, bn, mode, update_stats=False)
        g = rng.standard_normal(out.shape)
        gx, gg, gbeta = layers.batchnorm_backward(g, cache, bn)
        obj = lambda: float((layers.batchnorm_forward(x, bn, mode, update_stats=False)[0] * g).sum())
        add(f"batchnorm[{mode}].input", gx, numeric_gradient(obj, x, LAYER_STEP))
        add(f"batchnorm[{mode}].gamma", gg, numeric_gradient(obj, bn.gamma, LAYER_STEP))
        add(f"batchnorm[{mode}].beta", gbeta, numeric_gradient(obj, bn.beta, LAYER_STEP))

    # relu, away from the kink
    x = _away_from_zero(rng, shape)
    out, mask = layers.relu_forward(x)
    g = rng.standard_normal(out.shape)
    obj = lambda: float((layers.relu_forward(x)[0] * g).sum())
    add("relu.input", layers.relu_backward(g, mask), numeric_gradient(obj, x, LAYER_STEP))

    # maxpool, distinct values so no argmax flips within one step
    x = _distinct_windows(rng, shape)
    out, sw = layers.maxpool_forward(x)
    g = rng.standard_normal(out.shape)
    obj = lambda: float((layers.maxpool_forward(x)[0] * g).sum())
    add("maxpool.input", layers.maxpool_backward(g, sw), numeric_gradient(obj, x, LAYER_STEP))

    # unpool with the switches just recorded
    y = rng.standard_normal(out.shape)
    g = rng.standard_normal(shape)
    obj = lambda: float((layers.unpool_forward(y, sw, shape) * g).sum())
    add("unpool.input", layers.unpool_backward(g, sw), numeric_gradient(obj, y, LAYER_STEP))

    # concat / split
    a = rng.standard_normal((b, ch, h, w))
    bb = rng.standard_normal((b, 2, h, w))
    g = rng.standard_normal((b, ch + 2, h, w))
    ga, gbb = split_channels(g, ch)
    obj = lambda: float((concat_channels(a, bb) * g).sum())
    add("concat.first", ga, numeric_gradient(obj, a, LAYER_STEP))
    add("concat.second", gbb, numeric_gradient(obj, bb, LAYER_STEP))

    # softmax
    x = rng.standard_normal(shape)
    probs = layers.softmax_channel(x)
    g = rng.standard_normal(shape)
    obj = lambda: float((layers.softmax_channel(x) * g).sum())
    add("softmax.input", layers.softmax_backward(g, probs), numeric_gradient(obj, x, LAYER_STEP))
    return results


def _loss_problem(rng, num_classes, size=4, batch=2):
    labels = rng.integers(0, num_classes, size=(batch, size, size))
    onehot = loss.one_hot(labels, num_classes, dtype=np.float64)
    probs = rng.uniform(0.05, 1.0, size=onehot.shape)
    probs /= probs.sum(axis=1, keepdims=True)
    return labels, onehot, probs


def check_losses(seed: int = 0, corrupt: Optional[str] = None) -> List[CheckResult]:
    """Analytic probability gradients of the loss terms vs finite differences.

    Probabilities are perturbed as free variables. Step 1e-4 keeps every
    perturbed value positive and the curvature error negligible.
    """
    rng = np.random.default_rng(seed + 1)
    c = _Corruptor(corrupt)
    results = []
    step = 1e-4
    for k in (2, 10):
        labels, onehot, probs = _loss_problem(rng, k)
        boosted = frozenset(range(1, k))
        cases = {
            "unweighted": np.ones((labels.shape[0], 1) + labels.shape[1:]),
            "weighted": loss.weight_map(labels, loss.WeightConfig(10.0, 5.0, boosted)).astype(np.float64),
        }
        for tag, wmap in cases.items():
            name = f"logistic[{k}cls,{tag}]"
            obj = lambda: loss.logistic_loss(probs, onehot, wmap)
            an = c(name, loss.logistic_gradient(probs, onehot, wmap))
            results.append(CheckResult(name, relative_error(an, numeric_gradient(obj, probs, step)), LAYER_TOL))
            lc = loss.LossConfig(lambda1=1.0, lambda2=0.5, lambda3=0.0)
            name = f"combined[{k}cls,{tag}]"
            obj = lambda: loss.combined_loss(probs, onehot, wmap, None, lc)
            an = c(name, loss.loss_gradient(probs, onehot, wmap, lc))
            results.append(CheckResult(name, relative_error(an, numeric_gradient(obj, probs, step)), LAYER_TOL))
        name = f"dice[{k}cls]"
        obj = lambda: loss.dice_loss(probs, onehot)
        an = c(name, loss.dice_gradient(probs, onehot))
        results.append(CheckResult(name, relative_error(an, numeric_gradient(obj, probs, step)), LAYER_TOL))
    return results


def _kink_state(cache: model.ForwardCache):
    masks = [blk[2] for blk in cache.blocks.values()]
    switches = [sw.indices for sw in cache.switches.values()]
    return masks + switches


def _same_state(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def check_network(seed: int = 0, depth: int = 2, channels: int = 4, input_hw=(16, 8),
                  skip_mode: str = "full", corrupt: Optional[str] = None,
                  max_excluded: float = 0.05) -> List[CheckResult]:
    """Every parameter of a tiny network against differences of ``sum(probs * G)``.

    Entries whose perturbation flips a ReLU mask or a pool switch sit in a
    kink neighbourhood and are excluded. More than ``max_excluded`` of them
    fails the check.
    """
    rng = np.random.default_rng(seed + 2)
    c = _Corruptor(corrupt)
    cfg = model.ModelConfig(depth=depth, channels=channels, skip_mode=skip_mode)
    params = {k: v.astype(np.float64) for k, v in model.init_params(cfg, seed).items()}
    for name in params:
        if name.endswith(("bias", "beta")):
            params[name][...] = rng.standard_normal(params[name].shape) * 0.1
    x = rng.standard_normal((1, 1) + tuple(input_hw))
    probs, cache = model.forward(params, cfg, x, "train")
    base_state = _kink_state(cache)
    g = rng.standard_normal(probs.shape)
    grads, gx = model.backward(params, cfg, cache, g, return_input_grad=True)

    def objective():
        p, cch = model.forward(params, cfg, x, "train")
        return float((p * g).sum()), _same_state(base_state, _kink_state(cch))

    def compare(target, analytic):
        numeric = np.zeros(target.shape)
        smooth = np.ones(target.shape, dtype=bool)
        flat, nflat, sflat = target.reshape(-1), numeric.reshape(-1), smooth.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + NETWORK_STEP
            up, ok_up = objective()
            flat[i] = orig - NETWORK_STEP
            down, ok_down = objective()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * NETWORK_STEP)
            sflat[i] = ok_up and ok_down
        err = relative_error(analytic[smooth], numeric[smooth]) if smooth.any() else 0.0
        return err, int((~smooth).sum()), smooth.size

    worst, excluded, total = {}, 0, 0
    for name, an in grads.items():
        err, n_ex, n = compare(params[name], c(f"network.{name}", an))
        group = "network." + name.split(".", 1)[0]
        worst[group] = max(worst.get(group, 0.0), err)
        excluded += n_ex
        total += n
    err, n_ex, n = compare(x, gx)
    worst["network.input"] = err
    excluded += n_ex
    total += n
    results = [CheckResult(k, v, NETWORK_TOL) for k, v in worst.items()]
    results.append(CheckResult("network.kink_exclusions", excluded / total, max_excluded))
    return results


def run_all(seed: int = 0, corrupt: Optional[str] = None) -> List[CheckResult]:
    return check_layers(seed, corrupt=corrupt) + check_losses(seed, corrupt) + check_network(
        seed, corrupt=corrupt
    )
