from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    precision,
    set_precision,
    set_strict,
)
from .gradcheck import GradcheckReport, gradcheck
from . import functional as F

__all__ = [
    "AutodiffError", "NonFiniteError", "ShapeError", "Tensor", "as_tensor",
    "default_dtype", "grad_enabled", "no_grad", "parameter", "precision",
    "set_precision", "set_strict", "GradcheckReport", "gradcheck", "F",
]
