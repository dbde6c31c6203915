"""Joint registration and segmentation with dual-attention frequency fusion, at desk scale."""

from .errors import (
    BadMagicError,
    ConfigError,
    ContractViolation,
    DaffError,
    GradientError,
    NumericFault,
    TruncatedPayloadError,
    VersionMismatchError,
    VolumeFormatError,
)
from .losses import LossConfig
from .network import VARIANTS, ArchitectureConfig, RegistrationNet, build_variant, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, run_ablation, run_lambda_sweep, train

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "ArchitectureConfig",
    "BadMagicError",
    "ConfigError",
    "ContractViolation",
    "DaffError",
    "GradientError",
    "LossConfig",
    "NumericFault",
    "RegistrationNet",
    "TrainConfig",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "VolumeFormatError",
    "build_variant",
    "load_checkpoint",
    "run_ablation",
    "run_lambda_sweep",
    "save_checkpoint",
    "train",
]
