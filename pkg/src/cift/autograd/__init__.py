from . import ops
from .gradcheck import GradCheckReport, finite_diff_check, numerical_gradient, relative_error
from .ops import (
    attention,
    conv1d,
    elementwise,
    layer_norm,
    log_softmax,
    matmul,
    sigmoid,
    softmax,
    softmax_logsoftmax,
    tanh,
)
from .tensor import Context, Function, Tensor, is_grad_enabled, no_grad, tensor

__all__ = [
    "Context",
    "Function",
    "GradCheckReport",
    "Tensor",
    "attention",
    "conv1d",
    "elementwise",
    "finite_diff_check",
    "is_grad_enabled",
    "layer_norm",
    "log_softmax",
    "matmul",
    "no_grad",
    "numerical_gradient",
    "ops",
    "relative_error",
    "sigmoid",
    "softmax",
    "softmax_logsoftmax",
    "tanh",
    "tensor",
]
