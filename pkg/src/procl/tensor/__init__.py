"""Minimal float64 tensor core: tape autodiff, layers, Adam, checkpoints."""

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    TensorError,
    Var,
    backward,
    concat,
    conv2d,
    exp,
    forward_eval,
    grad_check,
    log,
    logsumexp,
    matmul,
    norm,
    relu,
    square,
    take,
    tanh,
)
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .kernels import BACKEND
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "BACKEND",
    "CheckpointError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TensorError",
    "Var",
    "adam_step",
    "backward",
    "concat",
    "conv2d",
    "exp",
    "forward_eval",
    "grad_check",
    "load_tensors",
    "log",
    "logsumexp",
    "matmul",
    "norm",
    "relu",
    "save_tensors",
    "square",
    "take",
    "tanh",
]
