"""Toy-scale geometry-image face recognition network."""

from .data import DataTooSmall, ImageDataset, ShapeMismatch, load_dataset
from .f3df import read_features, write_features
from .net import FEATURE_DIM, INPUT_SIZE, GeometryImageNet, NetSpec, build_model
from .train import (
    DivergedLoss,
    FrozenViolation,
    TrainConfig,
    TrainResult,
    extract_features,
    fine_tune,
    train,
)

__version__ = "0.1.0"
