"""Minimal learned-model substrate: dense/conv layers with manual backprop,
SGD training, finite-difference verification, and binary model files."""

from .model import (
    Conv,
    Dense,
    Dropout,
    Flatten,
    ConcatAux,
    Model,
    ModelSpec,
    ShapeError,
    forward,
    backward,
)
from .training import TrainConfig, TrainingDiverged, train
from .gradcheck import grad_check
from .serialize import load_model, save_model

__all__ = [
    "Conv",
    "Dense",
    "Dropout",
    "Flatten",
    "ConcatAux",
    "Model",
    "ModelSpec",
    "ShapeError",
    "forward",
    "backward",
    "TrainConfig",
    "TrainingDiverged",
    "train",
    "grad_check",
    "load_model",
    "save_model",
]
