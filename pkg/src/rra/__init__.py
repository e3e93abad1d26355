"""Iterative spatio-temporal attention with redundancy reduction, on a numpy autodiff core."""

from .data import SamplingSpec, SyntheticSpec, generate_synthetic
from .model import ModelConfig, RRAModel
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RRAModel", "SamplingSpec", "SyntheticSpec", "TrainConfig",
           "evaluate", "generate_synthetic", "train"]
