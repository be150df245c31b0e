"""Per-class imagination units and their training."""

from .checkpoint import load_unit, save_unit
from .loss import (combine_weights, compute_weight_alpha, compute_weight_gamma, sample_weights,
                   weighted_bce, weighted_bce_grad)
from .network import ImaginationUnit
from .optim import Adam, adam_step
from .replay import ReplayBuffer, Sample
from .train import PAPER_TRAIN_CONFIG, SceneData, TrainConfig, Trainer, fit_samples, train

__all__ = [
    "Adam", "ImaginationUnit", "PAPER_TRAIN_CONFIG", "ReplayBuffer", "Sample", "SceneData",
    "TrainConfig", "Trainer", "adam_step", "combine_weights", "compute_weight_alpha",
    "compute_weight_gamma", "fit_samples", "load_unit", "sample_weights", "save_unit", "train",
    "weighted_bce", "weighted_bce_grad",
]
