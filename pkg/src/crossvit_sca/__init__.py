"""Dual-branch vision transformer with selective cross-attention fusion, on a numpy autodiff core."""

from .model import DESK_CONFIG, FULL_CONFIG, CrossViT, ModelConfig
from .train import TrainConfig

__all__ = ["CrossViT", "ModelConfig", "TrainConfig", "DESK_CONFIG", "FULL_CONFIG"]
__version__ = "0.1.0"
