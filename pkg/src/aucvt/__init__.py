"""AU-supervised convolutional vision transformer for expression recognition."""

from .layers import AttentionConfig, ParamStore, StemConfig
from .model import (
    CANONICAL_AU_IDS,
    EXPRESSIONS,
    AuCvt,
    AUPatchSpec,
    ModelConfig,
    ModelOutput,
    build_model,
    stage_shape,
    toy_config,
)
from .tensor import Tensor, backward, finite_diff_grad, no_grad, reset_tape
from .train import LossWeights, LRSchedule, OptimConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AuCvt",
    "AUPatchSpec",
    "CANONICAL_AU_IDS",
    "EXPRESSIONS",
    "LossWeights",
    "LRSchedule",
    "ModelConfig",
    "ModelOutput",
    "OptimConfig",
    "ParamStore",
    "StemConfig",
    "Tensor",
    "backward",
    "build_model",
    "finite_diff_grad",
    "no_grad",
    "reset_tape",
    "stage_shape",
    "toy_config",
    "train_loop",
]
