"""The encoder / bottleneck / decoder network with explicit backpropagation.

Parameters live in a flat ``dict`` mapping names to arrays, ordered by
execution::

    enc1 .. encD, bottleneck, decD .. dec1, classifier

Each conv block owns ``<block>.conv.weight``, ``<block>.conv.bias``,
``<block>.bn.gamma``, ``<block>.bn.beta`` and the non-trainable buffers
``<block>.bn.running_mean`` / ``<block>.bn.running_var``. The classifier is a
1x1 convolution ``classifier.weight`` / ``classifier.bias``.

Level 1 is the full-resolution level; level ``depth`` is the coarsest.
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers
from .layers import BatchNormParams, ConvParams
from .tensor import DTYPE, ShapeError, argmax_channel, read_rtn1, write_rtn1

SKIP_MODES = ("full", "none", "low_res_only", "high_res_only")

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    channels: int = 64
    kernel: Tuple[int, int] = (7, 3)
    num_classes: int = 10
    skip_mode: str = "full"
    in_channels: int = 1

    def __post_init__(self):
        if self.depth not in (2, 3, 4):
            raise ValueError(f"depth must be 2, 3 or 4, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {self.kernel}")

    @property
    def multiple(self) -> int:
        """Spatial dims must be divisible by this."""
        return 2 ** self.depth

    def skip_active(self, level: int) -> bool:
        """Whether the decoder at ``level`` concatenates its encoder's features.

        Low-resolution skips are the deepest ``ceil(depth / 2)`` levels;
        high-resolution skips are the rest.
        """
        n_low = math.ceil(self.depth / 2)
        is_low = level > self.depth - n_low
        return {
            "full": True,
            "none": False,
            "low_res_only": is_low,
            "high_res_only": not is_low,
        }[self.skip_mode]

    def decoder_in_channels(self) -> Dict[int, int]:
        return {
            level: (2 if self.skip_active(level) else 1) * self.channels
            for level in range(self.depth, 0, -1)
        }

    def block_names(self) -> List[str]:
        enc = [f"enc{level}" for level in range(1, self.depth + 1)]
        dec = [f"dec{level}" for level in range(self.depth, 0, -1)]
        return enc + ["bottleneck"] + dec


@dataclass
class ForwardCache:
    mode: str
    input_shape: Tuple[int, ...]
    blocks: Dict[str, tuple] = field(default_factory=dict)
    switches: Dict[int, layers.PoolSwitches] = field(default_factory=dict)
    skips: Dict[int, np.ndarray] = field(default_factory=dict)
    classifier: Optional[layers.ConvCache] = None
    probs: Optional[np.ndarray] = None


def is_kernel(name: str) -> bool:
    """Names subject to weight decay: convolution kernels only."""
    return name.endswith("conv.weight") or name == "classifier.weight"


def is_trainable(name: str) -> bool:
    return "running_" not in name


def conv_params(params: Params, block: str) -> ConvParams:
    if block == "classifier":
        return ConvParams(params["classifier.weight"], params["classifier.bias"])
    return ConvParams(params[f"{block}.conv.weight"], params[f"{block}.conv.bias"])


def bn_params(params: Params, block: str) -> BatchNormParams:
    return BatchNormParams(
        params[f"{block}.bn.gamma"],
        params[f"{block}.bn.beta"],
        params[f"{block}.bn.running_mean"],
        params[f"{block}.bn.running_var"],
    )


def _block_in_channels(config: ModelConfig, block: str) -> int:
    if block == "enc1":
        return config.in_channels
    if block.startswith("dec"):
        return config.decoder_in_channels()[int(block[3:])]
    return config.channels


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    kh, kw = config.kernel
    c = config.channels
    shapes = {}
    for block in config.block_names():
        c_in = _block_in_channels(config, block)
        shapes[f"{block}.conv.weight"] = (c, c_in, kh, kw)
        shapes[f"{block}.conv.bias"] = (c,)
        for buf in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{block}.bn.{buf}"] = (c,)
    shapes["classifier.weight"] = (config.num_classes, c, 1, 1)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def fan_bound(shape: Tuple[int, int, int, int]) -> float:
    c_out, c_in, kh, kw = shape
    return math.sqrt(6.0 / (c_in * kh * kw + c_out * kh * kw))


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Uniform fan-based kernels, zero biases, unit BN scale.

    Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("weight"):
            s = fan_bound(shape)
            params[name] = rng.uniform(-s, s, size=shape).astype(DTYPE)
        elif name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape, dtype=DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=DTYPE)
    return params


def check_params(params: Params, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if list(params) != list(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ShapeError(f"parameter set does not match config (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, config needs {shape}")


def check_input(x: np.ndarray, config: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"input must be (B, {config.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % config.multiple or w % config.multiple:
        raise ShapeError(
            f"spatial dims {h}x{w} are not divisible by 2^depth = {config.multiple}"
        )


def _conv_block_forward(params, block, x, mode):
    z, conv_cache = layers.conv2d_forward(x, conv_params(params, block))
    y, bn_cache = layers.batchnorm_forward(z, bn_params(params, block), mode)
    a, relu_mask = layers.relu_forward(y)
    return a, (conv_cache, bn_cache, relu_mask)


def _conv_block_backward(params, block, grad, block_cache, grads):
    conv_cache, bn_cache, relu_mask = block_cache
    grad = layers.relu_backward(grad, relu_mask)
    grad, grads[f"{block}.bn.gamma"], grads[f"{block}.bn.beta"] = layers.batchnorm_backward(
        grad, bn_cache, bn_params(params, block)
    )
    grad, grads[f"{block}.conv.weight"], grads[f"{block}.conv.bias"] = layers.conv2d_backward(
        grad, conv_cache, conv_params(params, block)
    )
    return grad


def forward(params: Params, config: ModelConfig, x: np.ndarray, mode: str = "train"):
    """Run the network; returns ``(probs, cache)`` with probs ``(B, K, H, W)``."""
    check_input(x, config)
    cache = ForwardCache(mode=mode, input_shape=x.shape)
    h = x
    for level in range(1, config.depth + 1):
        block = f"enc{level}"
        h, cache.blocks[block] = _conv_block_forward(params, block, h, mode)
        cache.skips[level] = h
        h, cache.switches[level] = layers.maxpool_forward(h)
    h, cache.blocks["bottleneck"] = _conv_block_forward(params, "bottleneck", h, mode)
    for level in range(config.depth, 0, -1):
        block = f"dec{level}"
        h = layers.unpool_forward(h, cache.switches[level], cache.skips[level].shape)
        if config.skip_active(level):
            h = np.concatenate([h, cache.skips[level]], axis=1)
        h, cache.blocks[block] = _conv_block_forward(params, block, h, mode)
    logits, cache.classifier = layers.conv2d_forward(h, conv_params(params, "classifier"))
    cache.probs = layers.softmax_channel(logits)
    return cache.probs, cache


def backward(params: Params, config: ModelConfig, cache: ForwardCache,
             grad_probs: np.ndarray, return_input_grad: bool = False):
    """Gradients of a scalar loss for every trainable parameter.

    ``grad_probs`` is the loss gradient w.r.t. the softmax output. Returns a
    dict keyed like ``params`` (running statistics excluded), plus the input
    gradient when ``return_input_grad`` is set.
    """
    if cache.probs is None or grad_probs.shape != cache.probs.shape:
        raise ShapeError(
            f"grad_probs shape {grad_probs.shape} does not match cached probs "
            f"{None if cache.probs is None else cache.probs.shape}"
        )
    if set(cache.blocks) != set(config.block_names()):
        raise ShapeError("forward cache was produced by a different configuration")
    grads: Params = {}
    grad = layers.softmax_backward(grad_probs, cache.probs)
    grad, grads["classifier.weight"], grads["classifier.bias"] = layers.conv2d_backward(
        grad, cache.classifier, conv_params(params, "classifier")
    )
    skip_grads = {}
    for level in range(1, config.depth + 1):
        block = f"dec{level}"
        grad = _conv_block_backward(params, block, grad, cache.blocks[block], grads)
        if config.skip_active(level):
            grad, skip_grads[level] = np.split(grad, [config.channels], axis=1)
        grad = layers.unpool_backward(grad, cache.switches[level])
    grad = _conv_block_backward(params, "bottleneck", grad, cache.blocks["bottleneck"], grads)
    for level in range(config.depth, 0, -1):
        block = f"enc{level}"
        grad = layers.maxpool_backward(grad, cache.switches[level])
        if level in skip_grads:
            grad = grad + skip_grads[level]
        grad = _conv_block_backward(params, block, grad, cache.blocks[block], grads)
    ordered = {name: grads[name] for name in params if is_trainable(name)}
    if return_input_grad:
        return ordered, grad
    return ordered


def predict(params: Params, config: ModelConfig, bscan: np.ndarray):
    """Segment whole B-scans in inference mode.

    ``bscan`` is ``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)``. Dims that are
    not multiples of ``2**depth`` are zero-padded on the bottom/right and the
    output is cropped back. Returns ``(labels (B, H, W), probs (B, K, H, W))``.
    """
    x = np.asarray(bscan, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    h, w = x.shape[2:]
    m = config.multiple
    pad_h, pad_w = (-h) % m, (-w) % m
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    probs, _ = forward(params, config, x, mode="infer")
    probs = np.ascontiguousarray(probs[:, :, :h, :w])
    return argmax_channel(probs), probs


# ----------------------------------------------------------------- checkpoints

CHECKPOINT_MANIFEST = "manifest.txt"


def save_checkpoint(path, params: Params, config: ModelConfig, **meta) -> Path:
    """Write one RTN1 file per parameter plus ``manifest.txt``.

    Vectors are stored with dims ``(1, 1, 1, n)``. The manifest holds
    ``key=value`` lines for the config and ``meta``, then one
    ``param=<name>`` line per tensor in execution order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = "x".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for key, value in meta.items():
        lines.append(f"{key}={value}")
    for name, arr in params.items():
        write_rtn1(path / f"{name}.rtn", arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
        lines.append(f"param={name}")
    (path / CHECKPOINT_MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(params, config, meta)`` from a checkpoint directory."""
    path = Path(path)
    manifest = path / CHECKPOINT_MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: checkpoint manifest not found")
    fields = {}
    meta = {}
    names = []
    config_keys = set(ModelConfig.__dataclass_fields__)
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "param":
            names.append(value)
        elif key in config_keys:
            fields[key] = value
        else:
            meta[key] = value
    config = ModelConfig(
        depth=int(fields["depth"]),
        channels=int(fields["channels"]),
        kernel=tuple(int(v) for v in fields["kernel"].split("x")),
        num_classes=int(fields["num_classes"]),
        skip_mode=fields["skip_mode"],
        in_channels=int(fields.get("in_channels", 1)),
    )
    shapes = param_shapes(config)
    params = {}
    for name in names:
        if name not in shapes:
            raise ShapeError(f"{path}: unexpected parameter {name}")
        params[name] = read_rtn1(path / f"{name}.rtn").reshape(shapes[name])
    check_params(params, config)
    return params, config, meta
