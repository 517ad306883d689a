"""Minimal dense-tensor engine with double-backward support."""

from . import ops
from .ops import forward_op, op_kinds
from .tensor import (
    AutodiffError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    grad,
    no_grad,
    set_grad_enabled,
)

__all__ = [
    "AutodiffError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "backward",
    "forward_op",
    "grad",
    "no_grad",
    "op_kinds",
    "ops",
    "set_grad_enabled",
]
