from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    concat,
    current_tape,
    gelu,
    leaky_relu,
    mean_abs_diff,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    sum_all,
    tanh_scaled,
    transpose,
)
from .spatial import conv2d, conv_transpose2d, grid_sample_bilinear
from . import ntf

__all__ = [
    "ShapeError", "Tape", "Tensor", "add", "concat", "conv2d", "conv_transpose2d",
    "current_tape", "gelu", "grid_sample_bilinear", "leaky_relu", "mean_abs_diff", "mul",
    "ntf", "relu", "reshape", "scale", "sigmoid", "sub", "sum_all", "tanh_scaled", "transpose",
]
