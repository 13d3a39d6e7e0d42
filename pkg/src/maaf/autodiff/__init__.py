"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import functional
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    ShapeError,
    StaleTapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "functional",
    "GradcheckReport",
    "gradcheck",
    "ShapeError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "get_default_dtype",
    "no_grad",
    "precision",
    "set_default_dtype",
]
