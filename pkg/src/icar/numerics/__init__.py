"""Minimal fp64 tensor math with reverse-mode gradients."""

from icar.numerics.gradcheck import finite_diff_check
from icar.numerics.optim import AdamW
from icar.numerics.tensor import Tape, Tensor, active_tape, backward
from icar.numerics import ops

__all__ = [
    "AdamW",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "finite_diff_check",
    "ops",
]
