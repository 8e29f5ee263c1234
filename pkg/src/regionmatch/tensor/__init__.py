from .core import (
    ComputationTape,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    checked_mode,
    grad_enabled,
    is_checked,
    no_grad,
)
from .ops import (
    add,
    adaptive_avg_pool2d,
    batch_norm2d,
    bilinear_upsample,
    concat,
    conv2d,
    div,
    exp,
    global_max_pool,
    index_select,
    matmul,
    max_pool2d,
    mul,
    neg,
    relu,
    reshape,
    softplus,
    sqrt,
    sub,
    tmax,
    tmean,
    transpose,
    tsum,
)
from .serialize import load_arrays, save_arrays

__all__ = [
    "Tensor", "ComputationTape", "ShapeError", "backward", "no_grad",
    "checked_mode", "grad_enabled", "is_checked", "as_tensor",
    "add", "sub", "mul", "div", "neg", "exp", "sqrt", "relu", "softplus",
    "tsum", "tmean", "tmax", "matmul", "reshape", "transpose", "concat",
    "index_select", "conv2d", "max_pool2d", "global_max_pool",
    "adaptive_avg_pool2d", "bilinear_upsample", "batch_norm2d",
    "save_arrays", "load_arrays",
]
