"""Minimal dense-tensor library with reverse-mode gradients."""

from .core import (
    ComputationRecord,
    DimensionError,
    ParameterError,
    Tensor,
    as_tensor,
    default_dtype,
    get_precision,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
)
from .gradcheck import GradCheckReport, gradient_check
from . import ops

__all__ = [
    "ComputationRecord",
    "DimensionError",
    "GradCheckReport",
    "ParameterError",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "get_precision",
    "grad_enabled",
    "gradient_check",
    "no_grad",
    "ops",
    "precision",
    "set_precision",
]
