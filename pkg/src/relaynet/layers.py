"""Forward and backward passes for the network primitives.

Every forward function returns ``(output, cache)`` and the matching backward
function consumes that cache. Convolutions use the cross-correlation
convention (no kernel flip) with symmetric zero "same" padding. Arrays keep
the dtype of their input, so the same code runs in float32 for training and
float64 for gradient checks.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .tensor import ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

# im2col scratch budget per chunk, in elements
_COL_CHUNK_ELEMS = 1 << 23


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k_h, k_w)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON


@dataclass
class PoolSwitches:
    """Flat index into the ``H x W`` input plane of every pooled maximum."""

    indices: np.ndarray  # (B, C, H/2, W/2) int64
    input_shape: Tuple[int, int, int, int]


@dataclass
class ConvCache:
    x: np.ndarray


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str


# ---------------------------------------------------------------- convolution


def _columns(xp: np.ndarray, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Tap-major im2col: ``(kh*kw*C, B*H*W)`` from a padded ``(B, C, Hp, Wp)``."""
    b, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((kh * kw, c, b, h, w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i * kw + j] = xt[:, :, i:i + h, j:j + w]
    return cols.reshape(kh * kw * c, b * h * w)


def _chunks(b: int, h: int, w: int, c_in: int, kh: int, kw: int):
    step = max(1, _COL_CHUNK_ELEMS // (h * w * c_in * kh * kw))
    return range(0, b, step), step


def _correlate(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wmat = weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = np.empty((b, c_out, h, w), dtype=np.result_type(x, weight))
    starts, step = _chunks(b, h, w, c_in, kh, kw)
    for s in starts:
        part = wmat @ _columns(xp[s:s + step], h, w, kh, kw)
        out[s:s + step] = part.reshape(c_out, -1, h, w).transpose(1, 0, 2, 3)
    return out


def _kernel_grad(x: np.ndarray, grad_out: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c_in, h, w = x.shape
    c_out = grad_out.shape[1]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gw = np.zeros((c_out, kh * kw * c_in), dtype=np.result_type(x, grad_out))
    starts, step = _chunks(b, h, w, c_in, kh, kw)
    for s in starts:
        g = grad_out[s:s + step].transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw += g @ _columns(xp[s:s + step], h, w, kh, kw).T
    return gw.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)


def conv2d_forward(x: np.ndarray, p: ConvParams):
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, kernel expects {p.weight.shape[1]}"
        )
    out = _correlate(x, p.weight)
    out += p.bias.reshape(1, -1, 1, 1)
    return out, ConvCache(x)


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache, p: ConvParams):
    """Return ``(grad_x, grad_weight, grad_bias)``.

    The input gradient is a same-padded correlation of ``grad_out`` with the
    spatially flipped, channel-transposed kernel.
    """
    x = cache.x
    expected = (x.shape[0], p.weight.shape[0], x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    kh, kw = p.weight.shape[2:]
    flipped = p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = _correlate(grad_out, flipped)
    grad_w = _kernel_grad(x, grad_out, kh, kw)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------- batch normalization


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train",
                      update_stats: bool = True):
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, batchnorm has {p.gamma.shape[0]}")
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mean
            p.running_var[...] = (1 - m) * p.running_var + m * var
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * p.gamma.reshape(1, -1, 1, 1) + p.beta.reshape(1, -1, 1, 1)
    return out.astype(x.dtype, copy=False), BatchNormCache(xhat, inv_std, mode)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache, p: BatchNormParams):
    """Return ``(grad_x, grad_gamma, grad_beta)``.

    In train mode the batch mean and variance are functions of ``x`` and
    their contribution is included.
    """
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != cache shape {cache.xhat.shape}")
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * p.gamma.reshape(1, -1, 1, 1)
    inv_std = cache.inv_std.reshape(1, -1, 1, 1)
    if cache.mode == "infer":
        return dxhat * inv_std, grad_gamma, grad_beta
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    grad_x = inv_std / n * (n * dxhat - sum_d - xhat * sum_dx)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ----------------------------------------------------------------------- relu


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != cache shape {mask.shape}")
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


# ------------------------------------------------------------ pool / unpool


def _windows(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )


def _from_windows(win: np.ndarray) -> np.ndarray:
    b, c, h2, w2, _ = win.shape
    return win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, 2 * h2, 2 * w2
    )


def _local_offsets(switches: PoolSwitches) -> np.ndarray:
    """Window-local position (0..3, row-major) of every switch; validates it."""
    idx = switches.indices
    w = switches.input_shape[3]
    h2, w2 = idx.shape[2], idx.shape[3]
    rows, cols = np.divmod(idx, w)
    dr = rows - 2 * np.arange(h2).reshape(1, 1, -1, 1)
    dc = cols - 2 * np.arange(w2).reshape(1, 1, 1, -1)
    if np.any((dr < 0) | (dr > 1) | (dc < 0) | (dc > 1)):
        raise IndexError("pool switch index points outside its 2x2 window")
    return dr * 2 + dc


def maxpool_forward(x: np.ndarray):
    """2x2 / stride 2 max pooling. Returns ``(out, switches)``.

    Ties resolve to the first maximum in row-major window order.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = _windows(x)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    i = np.arange(h // 2).reshape(1, 1, -1, 1)
    j = np.arange(w // 2).reshape(1, 1, 1, -1)
    flat = (2 * i + local // 2) * w + 2 * j + local % 2
    return np.ascontiguousarray(out), PoolSwitches(flat.astype(np.int64), x.shape)


def maxpool_backward(grad_out: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    return unpool_forward(grad_out, switches, switches.input_shape)


def unpool_forward(x: np.ndarray, switches: PoolSwitches,
                   out_shape: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    if out_shape is None:
        out_shape = switches.input_shape
    out_shape = tuple(out_shape)
    if x.shape != switches.indices.shape:
        raise ShapeError(f"unpool input {x.shape} does not match switches {switches.indices.shape}")
    if out_shape[:2] != x.shape[:2] or out_shape[2:] != (2 * x.shape[2], 2 * x.shape[3]):
        raise ShapeError(f"unpool output shape {out_shape} is not 2x input {x.shape}")
    if tuple(switches.input_shape) != out_shape:
        raise ShapeError(f"switches were recorded for {switches.input_shape}, not {out_shape}")
    local = _local_offsets(switches)
    win = np.zeros(x.shape + (4,), dtype=x.dtype)
    np.put_along_axis(win, local[..., None], x[..., None], axis=-1)
    return _from_windows(win)


def unpool_backward(grad_out: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    if grad_out.shape != tuple(switches.input_shape):
        raise ShapeError(f"grad_out {grad_out.shape} != unpooled shape {switches.input_shape}")
    local = _local_offsets(switches)
    return np.take_along_axis(_windows(grad_out), local[..., None], axis=-1)[..., 0].copy()


# -------------------------------------------------------------------- softmax


def softmax_channel(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the gradient w.r.t. the probabilities."""
    if grad_out.shape != probs.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != probs shape {probs.shape}")
    inner = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - inner)
