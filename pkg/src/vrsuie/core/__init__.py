from . import ops, vrst
from .gradcheck import GradCheckError, grad_check, grad_check_report
from .tensor import (
    NumericError,
    ParameterError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    no_grad,
    stack,
    tape,
)

__all__ = [
    "GradCheckError",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "concat",
    "grad_check",
    "grad_check_report",
    "no_grad",
    "ops",
    "stack",
    "tape",
    "vrst",
]
