"""Dual-branch debiased prompt learning for a toy vision-language model."""

from .config import DataConfig, ExperimentConfig, TrainConfig
from .errors import DualFairError
from .objective import DualFairModel, TrainState, evaluate, train

__all__ = ["DataConfig", "ExperimentConfig", "TrainConfig", "DualFairError",
           "DualFairModel", "TrainState", "evaluate", "train"]
__version__ = "0.1.0"
