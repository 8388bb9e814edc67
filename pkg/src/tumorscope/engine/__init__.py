"""Tensor engine: reverse-mode autodiff, CNN layer kernels and Adam."""

from .ops import (
    BatchNormState,
    add,
    batchnorm,
    conv2d,
    conv_output_size,
    dense,
    dropout,
    flatten,
    getitem,
    global_average_pool,
    log_softmax,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ComputationRecord,
    GraphError,
    NonFiniteError,
    Operation,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    enable_grad,
    no_grad,
    set_default_dtype,
    trace,
)

__all__ = [
    "Adam", "AdamState", "BatchNormState", "ComputationRecord", "GraphError",
    "NonFiniteError", "Operation", "Tensor", "adam_step", "add", "backward",
    "batchnorm", "conv2d", "conv_output_size", "default_dtype", "dense", "dropout",
    "flatten", "get_default_dtype", "getitem", "global_average_pool", "grad_enabled",
    "log_softmax", "matmul", "maxpool2d", "mean", "mul", "no_grad", "enable_grad", "relu", "reshape",
    "set_default_dtype", "softmax", "softmax_cross_entropy", "trace",
]
