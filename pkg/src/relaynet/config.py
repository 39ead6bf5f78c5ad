"""Run configuration, baseline presets and ``key=value`` config files."""

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .loss import LossConfig, WeightConfig
from .model import ModelConfig
from .optim import OptimState


class ConfigError(ValueError):
    """Invalid preset, key or value."""


@dataclass(frozen=True)
class RunConfig:
    preset: str = "relaynet"
    depth: int = 3
    channels: int = 64
    kernel_h: int = 7
    kernel_w: int = 3
    num_classes: int = 10
    skip_mode: str = "full"
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 1e-4
    use_logistic: bool = True
    use_dice: bool = True
    use_weighting: bool = True
    reduction: str = "mean"
    omega1: float = 10.0
    omega2: float = 5.0
    base_lr: float = 0.1
    momentum: float = 0.9
    decay_every: int = 30
    decay_factor: float = 0.1
    epochs: int = 90
    max_steps: int = 0
    slice_width: int = 64
    batch_size: int = 50
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 10
    data: str = ""
    out: str = "run"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            channels=self.channels,
            kernel=(self.kernel_h, self.kernel_w),
            num_classes=self.num_classes,
            skip_mode=self.skip_mode,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            use_logistic=self.use_logistic,
            use_dice=self.use_dice,
            use_weighting=self.use_weighting,
            reduction=self.reduction,
        )

    def weight_config(self) -> WeightConfig:
        if not self.use_weighting:
            return WeightConfig(omega1=0.0, omega2=0.0)
        return WeightConfig(omega1=self.omega1, omega2=self.omega2)

    def optim_state(self) -> OptimState:
        return OptimState(
            momentum=self.momentum,
            base_lr=self.base_lr,
            decay_every=self.decay_every,
            decay_factor=self.decay_factor,
            lambda3=self.lambda3,
        )

    def validate(self) -> "RunConfig":
        try:
            self.model_config()
            self.loss_config()
            self.weight_config()
            self.optim_state()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.slice_width % 2 ** self.depth:
            raise ConfigError(
                f"slice width {self.slice_width} is not divisible by 2^depth = {2 ** self.depth}"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and epochs/max_steps >= 0")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


_FULL = dict(use_logistic=True, use_dice=True, use_weighting=True, skip_mode="full", depth=3)

# Ablation rows: architecture depth, loss terms, skip connections, weighting.
PRESETS = {
    "relaynet": dict(_FULL),
    "BL-1": dict(_FULL, skip_mode="none"),
    "BL-2": dict(_FULL, skip_mode="low_res_only"),
    "BL-3": dict(_FULL, skip_mode="high_res_only"),
    "BL-4": dict(_FULL, use_dice=False),
    "BL-5": dict(_FULL, use_logistic=False, use_weighting=False),
    "BL-6": dict(_FULL, depth=2),
    "BL-7": dict(_FULL, depth=4),
    "BL-8": dict(_FULL, use_dice=False, use_weighting=False),
}


def structural_signature(cfg: RunConfig) -> dict:
    """What a preset actually builds: depth, decoder input widths, loss terms."""
    mc = cfg.model_config()
    lc = cfg.loss_config()
    terms = [name for name, on in (("logistic", lc.use_logistic), ("dice", lc.use_dice)) if on]
    return {
        "architecture": f"{mc.depth}-1-{mc.depth}",
        "decoder_in_channels": mc.decoder_in_channels(),
        "skips": {level: mc.skip_active(level) for level in range(mc.depth, 0, -1)},
        "loss_terms": tuple(terms),
        "weighting": lc.use_weighting,
    }


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config file ({exc.strerror})") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def resolve(preset: Optional[str] = None, config_file=None, **overrides) -> RunConfig:
    """Merge, lowest priority first: defaults, preset, config file, overrides.

    ``RELAYNET_SEED`` supplies the seed when neither the file nor the
    overrides do.
    """
    file_values = read_config_file(config_file) if config_file else {}
    preset = preset or file_values.get("preset") or "relaynet"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset], preset=preset)
    env_seed = os.environ.get("RELAYNET_SEED")
    if env_seed is not None:
        merged["seed"] = env_seed
    merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    merged["preset"] = preset
    values = {k: _coerce(k, v) for k, v in merged.items()}
    return replace(RunConfig(), **values).validate()
