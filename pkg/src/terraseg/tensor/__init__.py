from .core import (
    ConfigurationError,
    DimensionError,
    NumericDomainError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)
from .gradcheck import GradCheckReport, check_gradients, grad_check
from . import ops

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "GradCheckReport",
    "NumericDomainError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "check_gradients",
    "default_dtype",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "ops",
    "precision",
]
