"""Soft adversarial actor-critic with risk-seeking adversaries."""
from saac.kernels import BACKEND
from saac.numerics import ConfigurationError, TrainingDivergence
from saac.trainer import TrainConfig, run_training

__version__ = "0.1.0"
__all__ = ["BACKEND", "ConfigurationError", "TrainConfig", "TrainingDivergence",
           "run_training"]
