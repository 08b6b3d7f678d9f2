"""Sharpness-aware optimizers, Hessian spectrum estimates and a small
benchmark harness, all on top of a numpy reverse-mode core."""

from .diffcore import (
    Batch,
    DifferentiableObjective,
    GradResult,
    HvpBackend,
    HvpKind,
    flatten,
    hvp,
    unflatten,
    value_and_grad,
)
from .modelzoo import ModelSpec, make_mlp, make_quadratic, two_moons
from .sharpopt import BaseOptimizerState, SharpnessConfig
from .spectrum import SpectrumReport, SpectrumSettings, full_report

__all__ = [
    "Batch",
    "BaseOptimizerState",
    "DifferentiableObjective",
    "GradResult",
    "HvpBackend",
    "HvpKind",
    "ModelSpec",
    "SharpnessConfig",
    "SpectrumReport",
    "SpectrumSettings",
    "flatten",
    "full_report",
    "hvp",
    "make_mlp",
    "make_quadratic",
    "two_moons",
    "unflatten",
    "value_and_grad",
]

__version__ = "0.1.0"
