"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from .tensor import DimensionError, Tensor, backward, make, parameter, topological_order
from .ops import (
    abs_, add, add_scalar, conv2d, dense, dot_const, global_avg_pool, matmul, mean,
    mul, relu, reshape, rnn_tanh, scale, softmax_cross_entropy, squared_distances,
    stack_scalars, sub, sum_, take_rows, tanh, time_avg_pool, transpose,
)
from .optim import SGD, sgd_step

__all__ = [
    "DimensionError", "Tensor", "backward", "make", "parameter", "topological_order",
    "abs_", "add", "add_scalar", "conv2d", "dense", "dot_const", "global_avg_pool",
    "matmul", "mean", "mul", "relu", "reshape", "rnn_tanh", "scale",
    "softmax_cross_entropy", "squared_distances", "stack_scalars", "sub", "sum_",
    "take_rows", "tanh", "time_avg_pool", "transpose", "SGD", "sgd_step",
]
