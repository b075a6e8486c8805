"""Desk-scale one-shot face re-enactment through dense 3D feature flow."""

from .datamodel import MotionParams, Sequence, load_dataset, make_synthetic_dataset, make_synthetic_sequence
from .estimator import FlowRenderer, ParamWindower
from .exceptions import NumericalError, PipelineStageError, ValidationError
from .losses import LossWeights, total_loss
from .pipeline import FlowRendererModel, ModelConfig, load_checkpoint, reenact_frame, save_checkpoint
from .training import TrainConfig, Trainer, run_training
from .warp3d import warp_volume

__version__ = "0.1.0"

__all__ = [
    "FlowRenderer",
    "FlowRendererModel",
    "LossWeights",
    "ModelConfig",
    "MotionParams",
    "NumericalError",
    "ParamWindower",
    "PipelineStageError",
    "Sequence",
    "TrainConfig",
    "Trainer",
    "ValidationError",
    "load_checkpoint",
    "load_dataset",
    "make_synthetic_dataset",
    "make_synthetic_sequence",
    "reenact_frame",
    "run_training",
    "save_checkpoint",
    "total_loss",
    "warp_volume",
]
