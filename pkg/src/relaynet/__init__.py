"""Retinal OCT layer and fluid segmentation with a hand-written encoder-decoder network."""

__version__ = "0.1.0"

from .config import PRESETS, ConfigError, RunConfig, resolve
from .data import BScan, DataError, PhantomSpec, generate_phantom, load_dataset, save_dataset
from .estimator import ReLayNetSegmenter
from .metrics import MetricsReport, report
from .model import ModelConfig, forward, init_params, load_checkpoint, predict, save_checkpoint
from .optim import NumericError
from .training import fit

__all__ = [
    "PRESETS", "ConfigError", "RunConfig", "resolve",
    "BScan", "DataError", "PhantomSpec", "generate_phantom", "load_dataset", "save_dataset",
    "ReLayNetSegmenter", "MetricsReport", "report",
    "ModelConfig", "forward", "init_params", "load_checkpoint", "predict", "save_checkpoint",
    "NumericError", "fit",
]
