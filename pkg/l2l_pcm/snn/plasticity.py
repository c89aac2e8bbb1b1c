"""
Eligibility traces, learning signals and the one-shot weight update for l2l-pcm.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from l2l_pcm.errors import UsageError
from l2l_pcm.grad.tape import Tape, Tensor

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class EligibilityState:
    """
    Low-pass filtered presynaptic activity per input and recurrent synapse row,
    plus the postsynaptic surrogate factor of the current step.

    The eligibility of synapse i -> j is ``h[j] * trace[i]``; it is kept in
    this factored form.
    """

    trace_in: np.ndarray
    trace_rec: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, inputs: int, neurons: int) -> "EligibilityState":
        return cls(np.zeros(inputs), np.zeros(neurons), np.zeros(neurons))

    @property
    def e_in(self) -> np.ndarray:
        return np.outer(self.trace_in, self.h)

    @property
    def e_rec(self) -> np.ndarray:
        return np.outer(self.trace_rec, self.h)


def eligibility_update(
    state: EligibilityState,
    spikes_in: np.ndarray,
    spikes_rec: np.ndarray,
    h: np.ndarray,
    decay: float,
) -> EligibilityState:
    """
    trace <- decay * trace + presynaptic spikes, then attach this step's h.

    Args:
        state: Previous traces
        spikes_in: Input spikes that drove this step
        spikes_rec: Recurrent spikes that drove this step (previous output)
        h: Surrogate factor of the postsynaptic neurons
        decay: Membrane decay gamma

    Returns:
        state: Updated traces
    """
    return EligibilityState(
        trace_in=decay * state.trace_in + spikes_in,
        trace_rec=decay * state.trace_rec + spikes_rec,
        h=np.asarray(h, dtype=np.float64),
    )


@dataclass
class LearningSignalState:
    signal: np.ndarray

    @classmethod
    def zeros(cls, neurons: int) -> "LearningSignalState":
        return cls(np.zeros(neurons))


def learning_signal_update(
    state: LearningSignalState,
    lsg_spikes: np.ndarray,
    psi_out: np.ndarray,
    decay: float,
) -> LearningSignalState:
    """L <- decay * L + xi @ psi_out; ``psi_out`` is (LSG neurons, trainee neurons)."""
    return LearningSignalState(decay * state.signal + lsg_spikes @ psi_out)


@dataclass
class EligibilityHistory:
    """Per-step factored eligibilities of phase one, each (T, n)."""

    trace_in: np.ndarray
    trace_rec: np.ndarray
    h: np.ndarray

    def __len__(self) -> int:
        return int(self.h.shape[0])

    @classmethod
    def stack(cls, states: Sequence[EligibilityState]) -> "EligibilityHistory":
        return cls(
            np.stack([s.trace_in for s in states]),
            np.stack([s.trace_rec for s in states]),
            np.stack([s.h for s in states]),
        )


def inner_one_shot_update(
    w_in: np.ndarray,
    w_rec: np.ndarray,
    signals: np.ndarray,
    history: EligibilityHistory,
    lr: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    theta1 = theta - lr * sum_t L_t (.) e_t for input and recurrent weights.

    The recurrent diagonal is not updated. Readout weights are not an
    argument and cannot change.

    Args:
        w_in: (inputs, N) input weights
        w_rec: (N, N) recurrent weights
        signals: (T, N) learning signals of phase one
        history: Eligibilities of the same T steps
        lr: Inner learning rate alpha

    Returns:
        w_in, w_rec: Updated copies
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[0] != len(history):
        raise UsageError(
            f"{signals.shape[0]} learning-signal steps "
            f"vs {len(history)} eligibility steps"
        )
    post = signals * history.h
    g_in = history.trace_in.T @ post
    g_rec = history.trace_rec.T @ post
    np.fill_diagonal(g_rec, 0.0)
    return w_in - lr * g_in, w_rec - lr * g_rec


def off_diagonal(neurons: int) -> np.ndarray:
    return 1.0 - np.eye(neurons)


def record_one_shot_update(
    tape: Tape,
    w_in: Tensor,
    w_rec: Tensor,
    inputs: Tensor,
    presynaptic: Tensor,
    surrogate: Tensor,
    signals: Tensor,
    decay: float,
    lr: float,
    mask: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Record the one-shot update as differentiable tape nodes.

    Args:
        tape: Tape holding the phase-one graph
        w_in, w_rec: Shared initial weights theta
        inputs: (B, T, inputs) input spikes
        presynaptic: (B, T, N) one-step-delayed trainee spikes
        surrogate: (B, T, N) trainee surrogate factors h
        signals: (B, T, N) filtered learning signals L
        decay: Eligibility trace decay gamma
        lr: Inner learning rate alpha
        mask: (N, N) constant that zeroes the recurrent diagonal

    Returns:
        w_in1, w_rec1: Per-trial updated weights, (B, inputs, N) and (B, N, N)
    """
    post = tape.mul(signals, surrogate)
    trace_in = tape.exp_filter(inputs, decay, axis=1)
    trace_rec = tape.exp_filter(presynaptic, decay, axis=1)
    g_in = tape.matmul(tape.transpose(trace_in, (0, 2, 1)), post)
    g_rec = tape.matmul(tape.transpose(trace_rec, (0, 2, 1)), post)
    if mask is not None:
        g_rec = tape.mul(g_rec, mask)
    return tape.weight_update(w_in, g_in, lr), tape.weight_update(w_rec, g_rec, lr)
