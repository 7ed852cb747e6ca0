"""Minimal N-d tensor engine with higher-order reverse-mode differentiation."""
from .tensor import (
    DetachedGradientWarning,
    Function,
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_precision,
    grad,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_precision,
    set_grad_enabled,
)
from .functional import (
    ShapeError,
    avg_pool2x,
    concat,
    concat_channels,
    conv2d,
    dense,
    leaky_relu,
    matmul,
    max_pool2x,
    mean,
    reshape,
    sqrt,
    upsample_nearest2x,
)
from .functional import sum as tsum
from .gradcheck import check_grad, finite_diff_grad, relative_error
from .rng import RngStream, rand_normal


def backward(output, inputs, create_graph=False):
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``."""
    return grad(output, list(inputs), create_graph=create_graph)


__all__ = [
    "DetachedGradientWarning", "Function", "RngStream", "ShapeError", "Tape", "Tensor",
    "as_tensor", "avg_pool2x", "backward", "check_grad", "concat", "concat_channels", "conv2d",
    "default_dtype", "dense", "finite_diff_grad", "get_default_precision", "grad",
    "is_grad_enabled", "leaky_relu", "matmul", "max_pool2x", "mean", "no_grad", "precision",
    "rand_normal", "relative_error", "reshape", "set_default_precision", "set_grad_enabled",
    "sqrt", "tsum", "upsample_nearest2x",
]
