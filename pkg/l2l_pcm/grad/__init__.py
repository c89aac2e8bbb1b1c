"""
Tape-based differentiation components for l2l-pcm.
"""

from l2l_pcm.grad.base import Primitive, SparseGrad
from l2l_pcm.grad.check import finite_diff_check
from l2l_pcm.grad.optim import AdamState, adam_step
from l2l_pcm.grad.primitives import PRIMITIVES
from l2l_pcm.grad.tape import Tape, Tensor, backward, forward

__all__ = [
    "Primitive",
    "SparseGrad",
    "PRIMITIVES",
    "Tape",
    "Tensor",
    "forward",
    "backward",
    "AdamState",
    "adam_step",
    "finite_diff_check",
]
