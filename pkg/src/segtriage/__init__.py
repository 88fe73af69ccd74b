"""Dropout-sampling segmentation with uncertainty-driven case referral."""

__version__ = "0.1.0"

from .referral import ThresholdConfig
from .uncertainty import METRICS, THEORETICAL_MAX
from .unet import Architecture, ModelParams, TrainConfig

__all__ = [
    "Architecture",
    "METRICS",
    "ModelParams",
    "THEORETICAL_MAX",
    "ThresholdConfig",
    "TrainConfig",
    "__version__",
]
