"""Differentiable layer-size optimization through noise-injection capacity gates."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .gate import GateState, OrderedKState, gate_eq1, gate_per_unit, lambda_penalty, mc_normalized_error
from .layers import AdaptiveLinear, DynamicLinear, FixedLinear, ModelGraph, active_units, consolidate, forward
from .profiler import ProfileReport, effective_flops, profile
from .rng import RngStream
from .trainer import AdamState, TrainConfig, TrainHistory, adam_step, bce_loss, eer, l1_loss, train_two_phase

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_check",
    "GateState",
    "OrderedKState",
    "gate_eq1",
    "gate_per_unit",
    "lambda_penalty",
    "mc_normalized_error",
    "AdaptiveLinear",
    "DynamicLinear",
    "FixedLinear",
    "ModelGraph",
    "active_units",
    "consolidate",
    "forward",
    "ProfileReport",
    "effective_flops",
    "profile",
    "RngStream",
    "AdamState",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "bce_loss",
    "eer",
    "l1_loss",
    "train_two_phase",
]
