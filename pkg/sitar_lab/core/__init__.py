"""Autodiff engine, models, objectives, training and the penalty verifier."""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ContainerFormatError,
    DatasetError,
    IdxFormatError,
    NonFiniteError,
    ShapeError,
    SitarError,
    TheoryCheckError,
    TrainingDivergedError,
)
from .networks import SitarModel, build_model, reparameterize
from .objectives import LossBreakdown, total_loss
from .shortcut_proxy import ShortcutWeights, correlation_weights, perturb
from .tensor import Tensor, backward, stop_gradient
from .theory import Verdict, mc_lhs, penalty_rhs, verify_scaling
from .trainer import TrainState, evaluate, predict, train
from .traversal import traverse_latents, write_pixmap

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "ContainerFormatError",
    "DatasetError",
    "IdxFormatError",
    "NonFiniteError",
    "ShapeError",
    "SitarError",
    "TheoryCheckError",
    "TrainingDivergedError",
    "SitarModel",
    "build_model",
    "reparameterize",
    "LossBreakdown",
    "total_loss",
    "ShortcutWeights",
    "correlation_weights",
    "perturb",
    "Tensor",
    "backward",
    "stop_gradient",
    "Verdict",
    "mc_lhs",
    "penalty_rhs",
    "verify_scaling",
    "TrainState",
    "evaluate",
    "predict",
    "train",
    "traverse_latents",
    "write_pixmap",
]
