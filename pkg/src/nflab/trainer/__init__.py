"""Training, metrics, optimization, and checkpointing."""

from .checkpoint import load_checkpoint, save_checkpoint
from .loop import (LOG_COLUMNS, TrainConfig, Trainer, lr_at,
                   photometric_loss)
from .metrics import mse, psnr, ssim
from .optim import OptimizerState, adam_init, adam_step

__all__ = [
    "LOG_COLUMNS", "OptimizerState", "TrainConfig", "Trainer", "adam_init",
    "adam_step", "load_checkpoint", "lr_at", "mse", "photometric_loss",
    "psnr", "save_checkpoint", "ssim",
]
