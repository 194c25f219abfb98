"""Minimal reverse-mode tensor engine: ops, Adam, grad checking, checkpoints."""

from .tensor import ShapeError, Tape, Tensor, backward
from .ops import (
    BCE_EPS,
    RunningStats,
    add,
    arctan,
    batchnorm2d,
    bce_loss,
    clip,
    conv2d,
    dense,
    div,
    dropout,
    exp,
    flatten,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    maximum,
    minimum,
    mul,
    neg,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    take_rows,
    tmean,
    transpose,
    tsum,
    upsample2d_nearest,
)
from .optim import AdamState, adam_step
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import Model

__all__ = [
    "BCE_EPS",
    "AdamState",
    "CheckpointError",
    "Model",
    "RunningStats",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "arctan",
    "backward",
    "batchnorm2d",
    "bce_loss",
    "clip",
    "conv2d",
    "dense",
    "div",
    "dropout",
    "exp",
    "flatten",
    "grad_check",
    "leaky_relu",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "maximum",
    "minimum",
    "mul",
    "neg",
    "pow_scalar",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "sub",
    "take_rows",
    "tmean",
    "transpose",
    "tsum",
    "upsample2d_nearest",
]
