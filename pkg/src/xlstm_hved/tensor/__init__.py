"""Minimal dense tensor engine with reverse-mode autodiff."""

from . import functional
from .core import (ContractViolation, NumericError, OpNode, Tensor, as_tensor,
                   default_dtype, dtype_scope, grad_enabled, no_grad, set_default_dtype)
from .functional import (activation, conv3d, group_norm, layer_norm, linear, resample,
                         sigmoid, softmax)
from .gradcheck import GradReport, check_gradients, finite_diff_check

__all__ = [
    "ContractViolation", "NumericError", "OpNode", "Tensor", "as_tensor", "default_dtype",
    "dtype_scope", "grad_enabled", "no_grad", "set_default_dtype", "functional", "activation",
    "conv3d", "group_norm", "layer_norm", "linear", "resample", "sigmoid", "softmax",
    "GradReport", "check_gradients", "finite_diff_check",
]
