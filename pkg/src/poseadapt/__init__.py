"""Unsupervised domain adaptation for 2D keypoint estimation.

Adversarial multi-scale feature alignment plus an online coarse-to-fine
pseudo-label replacement curriculum: a self-distillation inner loop, an EMA
mean-teacher outer loop, per-joint small-loss selection, and MixUp.
"""

from .core import (
    CheckpointError,
    ConfigError,
    DataError,
    Keypoint,
    NumericalAbortError,
    PckReport,
    PoseSample,
    TargetLabelLeakError,
    decode_heatmap,
    encode_heatmap,
    hide_target_labels,
    pck,
)
from .config import TrainConfig, apply_overrides, config_hash, load_config

__version__ = "0.1.0"
