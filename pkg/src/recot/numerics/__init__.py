"""From-scratch differentiable numerics: tensors, tape, kernels, attention."""
from .tensor import (
    Tensor, Node, NonFiniteError, ShapeError,
    backward, constant, lift, default_dtype, use_dtype, no_grad, grad_enabled,
    finite_checks, needs_grad,
)
from .ops import (
    add, sub, mul, div, neg, matmul, bmm, bmm_nt,
    transpose2d, reshape, narrow, cat_rows, split_heads, merge_heads,
    sigmoid, relu, exp, log, abs_, maximum, minimum, clip,
    softmax, sum_, mean_, reduce_max, layer_norm, linear,
    conv2d, avg_pool2d, resize_bilinear,
)
from .attention import MhaParams, mha
from .registry import ParamRegistry, DuplicateParamError
from .gradcheck import GradCheckEntry, GradCheckReport, grad_check

__all__ = [
    "Tensor", "Node", "NonFiniteError", "ShapeError",
    "backward", "constant", "lift", "default_dtype", "use_dtype", "no_grad",
    "grad_enabled", "finite_checks", "needs_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "bmm", "bmm_nt",
    "transpose2d", "reshape", "narrow", "cat_rows", "split_heads", "merge_heads",
    "sigmoid", "relu", "exp", "log", "abs_", "maximum", "minimum", "clip",
    "softmax", "sum_", "mean_", "reduce_max", "layer_norm", "linear",
    "conv2d", "avg_pool2d", "resize_bilinear",
    "MhaParams", "mha",
    "ParamRegistry", "DuplicateParamError",
    "GradCheckEntry", "GradCheckReport", "grad_check",
]
