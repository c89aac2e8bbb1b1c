"""
Adam optimizer for l2l-pcm.
"""

import logging
from typing import Dict, Mapping, Optional

import numpy as np

from l2l_pcm.errors import NonFiniteError, ShapeError, UsageError

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class AdamState:
    """
    Moment accumulators and schedule of one Adam optimizer.

    The learning rate in effect at step ``t`` (counting from 0) is
    ``lr * decay ** (t // decay_every)``; ``decay = 1`` disables the schedule.
    """

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay: float = 1.0,
        decay_every: int = 1,
    ):
        """
        Initialize the AdamState.

        Args:
            params: Parameter tensors by name (only shapes and dtypes are used)
            lr: Base learning rate
            beta1: First-moment decay
            beta2: Second-moment decay
            eps: Denominator floor
            decay: Multiplicative learning-rate decay
            decay_every: Steps between decays
        """
        if lr <= 0 or decay_every < 1:
            raise UsageError("Adam needs lr > 0 and decay_every >= 1")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.decay_every = decay_every
        self.step = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

        logger.info(
            "AdamState initialized with %d tensors, lr: %g, decay: %g every %d steps",
            len(self.m), lr, decay, decay_every,
        )

    def effective_lr(self, step: Optional[int] = None) -> float:
        step = self.step if step is None else step
        return self.lr * self.decay ** (step // self.decay_every)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat tensor table for checkpoints."""
        table = {f"adam.m.{k}": v for k, v in self.m.items()}
        table.update({f"adam.v.{k}": v for k, v in self.v.items()})
        table["adam.step"] = np.array([self.step], dtype=np.float32)
        return table

    def load_arrays(self, table: Mapping[str, np.ndarray]) -> None:
        for name in self.m:
            if f"adam.m.{name}" in table:
                dtype = self.m[name].dtype
                self.m[name] = np.asarray(table[f"adam.m.{name}"], dtype=dtype)
                self.v[name] = np.asarray(table[f"adam.v.{name}"], dtype=dtype)
        if "adam.step" in table:
            self.step = int(np.asarray(table["adam.step"]).ravel()[0])


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> Dict[str, np.ndarray]:
    """
    Apply one Adam update with bias correction.

    Args:
        state: Optimizer state (mutated: moments and step counter)
        params: Current parameter tensors
        grads: Gradients by parameter name; missing names are left alone

    Returns:
        params: New parameter tensors (inputs are not modified)

    Raises:
        NonFiniteError: naming the first tensor whose gradient has NaN/inf
    """
    for name, grad in grads.items():
        if name not in state.m:
            raise UsageError(f"no Adam state for {name!r}")
        if np.shape(grad) != state.m[name].shape:
            raise ShapeError(
                f"gradient for {name} is {np.shape(grad)}, "
                f"expected {state.m[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient", tensor=name)

    lr = state.effective_lr()
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    updated = dict(params)
    for name, grad in grads.items():
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        state.m[name] = m.astype(state.m[name].dtype)
        state.v[name] = v.astype(state.v[name].dtype)
        delta = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated[name] = (params[name] - delta).astype(params[name].dtype)
    return updated
