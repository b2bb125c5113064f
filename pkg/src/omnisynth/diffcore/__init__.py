"""Minimal reverse-mode autodiff, optimizer, and checkpoint I/O."""

from .checkpoint import CheckpointError, load_params, save_params
from .conv import conv2d_circular
from .module import Conv2dCircular, Linear, Module
from .optim import AdamState, adam_step, lr_schedule
from .tensor import (
    DiffcoreError,
    affine,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    absolute,
    add,
    concat,
    cos,
    cumsum,
    div,
    exp,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    roll,
    sigmoid,
    sin,
    softmax,
    square,
    strict_finite_checks,
    sub,
    tensor_sum,
    transpose,
    upsample2x,
)

__all__ = [
    "CheckpointError",
    "load_params",
    "save_params",
    "conv2d_circular",
    "Conv2dCircular",
    "Linear",
    "Module",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "DiffcoreError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "absolute",
    "affine",
    "add",
    "concat",
    "cos",
    "cumsum",
    "div",
    "exp",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "roll",
    "sigmoid",
    "sin",
    "softmax",
    "square",
    "strict_finite_checks",
    "sub",
    "tensor_sum",
    "transpose",
    "upsample2x",
]
