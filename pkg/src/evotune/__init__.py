"""Genetic-algorithm hyperparameter tuning around a from-scratch DDPG+HER
goal-reaching stack, with desk-scale environments and a campaign CLI."""

from .agent import TrainSchedule, TrainingTrace, train_until
from .envs import ENV_NAMES, make_env
from .ga import GaConfig, decode, encode, evolve
from .hyperparams import PRESETS, Hyperparameters

__version__ = "0.1.0"

__all__ = [
    "ENV_NAMES",
    "GaConfig",
    "Hyperparameters",
    "PRESETS",
    "TrainSchedule",
    "TrainingTrace",
    "decode",
    "encode",
    "evolve",
    "make_env",
    "train_until",
    "__version__",
]
