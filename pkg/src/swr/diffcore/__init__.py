"""Minimal reverse-mode tensor engine."""
from . import ops
from .ops import (
    abs, add, avg_pool2d, batch_norm, conv2d, cross_entropy, depthwise_conv2d, getitem,
    global_avg_pool, gumbel_softmax_hard, linear, log_softmax, matmul, mean, mul,
    pointwise_conv2d, relu, reshape, scale, softmax, sub, sum,
)
from .optim import SGD, Adam, AdamState, adam_step, cosine_schedule, sgd_step
from .tensor import DTYPE, ShapeError, Tape, Tensor, backward, get_tape, no_grad

__all__ = [
    "Adam", "AdamState", "DTYPE", "SGD", "ShapeError", "Tape", "Tensor", "abs", "adam_step",
    "add", "avg_pool2d", "backward", "batch_norm", "conv2d", "cosine_schedule", "cross_entropy",
    "depthwise_conv2d", "get_tape", "getitem", "global_avg_pool", "gumbel_softmax_hard",
    "linear", "log_softmax", "matmul", "mean", "mul", "no_grad", "ops", "pointwise_conv2d",
    "relu", "reshape", "scale", "sgd_step", "softmax", "sub", "sum",
]
