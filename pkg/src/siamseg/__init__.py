"""Joint per-frame segmentation and feature-similarity label propagation
for partially labeled videos, with adaptive alternation between supervised,
half-labeled and unlabeled training modes and clip-wise multi-source
inference."""

from .errors import DataError, NumericalError
from .model import ModelConfig, SegPropModel, load_checkpoint, save_checkpoint
from .schedule import AatConfig
from .tensor import Tensor
from .trainer import TrainConfig, TrainMode, train

__version__ = "0.1.0"

__all__ = [
    "AatConfig",
    "DataError",
    "ModelConfig",
    "NumericalError",
    "SegPropModel",
    "Tensor",
    "TrainConfig",
    "TrainMode",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
