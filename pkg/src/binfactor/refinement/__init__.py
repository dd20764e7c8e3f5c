# src/binfactor/refinement/__init__.py
"""Toy chains and gradient-based refinement."""

from .chain import Activation, DenseLayer, FactorizedLatentLayer, ToyChain, flip_ratio, forward_chain, layer_inputs
from .tuning import (
    Schedule,
    TuneConfig,
    block_loss,
    block_loss_gradients,
    kd_loss,
    mitigate_error_propagation,
    ste_refine,
    tune_scales_kd,
)

__all__ = [
    "Activation",
    "DenseLayer",
    "FactorizedLatentLayer",
    "Schedule",
    "ToyChain",
    "TuneConfig",
    "block_loss",
    "block_loss_gradients",
    "flip_ratio",
    "forward_chain",
    "kd_loss",
    "layer_inputs",
    "mitigate_error_propagation",
    "ste_refine",
    "tune_scales_kd",
]
