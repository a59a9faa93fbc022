"""Minimal numpy autograd: tensors, a recording tape, primitives and Adam."""

from .functional import (
    add,
    concat,
    constant,
    cross_entropy,
    l2_norm_sq,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    pick,
    reshape,
    row_gather,
    scale,
    scale_rows,
    segment_softmax,
    segment_sum,
    slice_last,
    softmax,
    sub,
    tanh,
    total,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "Adam",
    "AdamState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "backward",
    "concat",
    "constant",
    "cross_entropy",
    "l2_norm_sq",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "pick",
    "reshape",
    "row_gather",
    "scale",
    "scale_rows",
    "segment_softmax",
    "segment_sum",
    "slice_last",
    "softmax",
    "sub",
    "tanh",
    "total",
]
