"""
Leaky integrate-and-fire neurons (with optional threshold adaptation) for l2l-pcm.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from l2l_pcm.grad.tape import Tape, Tensor

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CellParams:
    """
    Constants shared by one population.

    ``beta`` holds the threshold increase per adaptation unit for every
    neuron; plain LIF neurons have 0 there.
    """

    decay: float
    v_th: float
    dampening: float = 0.3
    refractory: int = 5
    rho: float = 0.0
    beta: Optional[np.ndarray] = None

    @property
    def adaptive(self) -> bool:
        return self.beta is not None and bool(np.any(self.beta))

    def without_refractoriness(self) -> "CellParams":
        return replace(self, refractory=0)


@dataclass
class NeuronState:
    """Membrane potential, last spikes, adaptation and refractory counters."""

    v: np.ndarray
    z: np.ndarray
    a: np.ndarray
    counter: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(
            v=np.zeros(shape),
            z=np.zeros(shape),
            a=np.zeros(shape),
            counter=np.zeros(shape, dtype=np.int64),
        )


def surrogate(u: np.ndarray, v_th: float, dampening: float) -> np.ndarray:
    """Triangular pseudo-derivative h = dampening * max(0, 1 - |u / v_th|)."""
    return dampening * np.maximum(0.0, 1.0 - np.abs(u / v_th))


def neuron_step(
    state: NeuronState, current: np.ndarray, cell: CellParams
) -> Tuple[NeuronState, np.ndarray]:
    """
    Advance a population by one step given its total synaptic current.

    v' = decay * v + current - z * v_th, a' = rho * a + z, and a neuron fires
    when v' reaches v_th + beta * a' unless it is still refractory.

    Args:
        state: State after the previous step
        current: Input plus recurrent current of this step
        cell: Population constants

    Returns:
        state: New state; ``state.z`` holds the emitted spikes
        h: Surrogate factor of this step (0 while refractory)
    """
    v = cell.decay * state.v + current - cell.v_th * state.z
    a = cell.rho * state.a + state.z if cell.adaptive else state.a
    threshold = cell.v_th + (cell.beta * a if cell.adaptive else 0.0)
    u = v - threshold
    free = state.counter == 0
    z = ((u >= 0) & free).astype(np.float64)
    h = surrogate(u, cell.v_th, cell.dampening) * free
    counter = np.where(z > 0, cell.refractory, np.maximum(state.counter - 1, 0))
    return NeuronState(v=v, z=z, a=a, counter=counter), h


def lif_step(
    state: NeuronState,
    spikes_in: np.ndarray,
    w_in: np.ndarray,
    w_rec: np.ndarray,
    cell: CellParams,
) -> Tuple[NeuronState, np.ndarray]:
    """
    One step of a recurrent LIF population; recurrent spikes arrive after one step.

    Returns:
        state: New state
        spikes: Output spikes of this step
    """
    if cell.adaptive:
        cell = replace(cell, beta=None)
    state, _ = neuron_step(state, spikes_in @ w_in + state.z @ w_rec, cell)
    return state, state.z


def alif_step(
    state: NeuronState,
    spikes_in: np.ndarray,
    w_in: np.ndarray,
    w_rec: np.ndarray,
    cell: CellParams,
) -> Tuple[NeuronState, np.ndarray]:
    """Like ``lif_step`` with the adaptive threshold v_th + beta * a."""
    state, _ = neuron_step(state, spikes_in @ w_in + state.z @ w_rec, cell)
    return state, state.z


@dataclass
class SpikeRecord:
    """Tape tensors of one simulated phase, each (B, T, N)."""

    spikes: Tensor
    presynaptic: Tensor
    surrogate: Tensor


def record_population(
    tape: Tape,
    drive: Tensor,
    w_rec: Tensor,
    cell: CellParams,
) -> SpikeRecord:
    """
    Record a population's dynamics step by step.

    Refractory masks follow the spikes seen while recording and are fixed
    as constants, so replays keep the same refractory pattern. The reset
    term is detached from the gradient.

    Args:
        tape: Eager tape
        drive: (B, T, N) feed-forward current
        w_rec: (N, N) shared or (B, N, N) per-trial recurrent weights
        cell: Population constants

    Returns:
        record: Spikes, their one-step-delayed copy and surrogate factors
    """
    batch, steps, neurons = tape.value(drive).shape
    per_trial = tape.value(w_rec).ndim == 3
    beta = tape.constant(cell.beta) if cell.adaptive else None
    zero = tape.constant(np.zeros((batch, neurons)))
    counter = np.zeros((batch, neurons), dtype=np.int64)

    v = z = a = None
    spikes: List[Tensor] = []
    delayed: List[Tensor] = [zero]
    factors: List[Tensor] = []
    for t in range(steps):
        current = tape.index(drive, (slice(None), t))
        if z is not None:
            if per_trial:
                row = tape.reshape(z, (batch, 1, neurons))
                rec = tape.reshape(tape.matmul(row, w_rec), (batch, neurons))
            else:
                rec = tape.matmul(z, w_rec)
            reset = tape.scale(tape.stop_gradient(z), cell.v_th)
            current = tape.sub(tape.add(current, rec), reset)
        v = current if v is None else tape.add(tape.scale(v, cell.decay), current)

        if cell.adaptive:
            a = zero if a is None else tape.add(tape.scale(a, cell.rho), z)
            u = tape.sub(tape.add(v, -cell.v_th), tape.mul(a, beta))
        else:
            u = tape.add(v, -cell.v_th)

        z = tape.heaviside(u, cell.v_th, cell.dampening)
        h = tape.pseudo_derivative(u, cell.v_th, cell.dampening)
        free = counter == 0
        if not free.all():
            mask = tape.constant(free.astype(np.float64))
            z, h = tape.mul(z, mask), tape.mul(h, mask)
        fired = tape.value(z) >= 0.5
        counter = np.where(fired, cell.refractory, np.maximum(counter - 1, 0))

        spikes.append(z)
        factors.append(h)
        if t + 1 < steps:
            delayed.append(z)

    return SpikeRecord(
        spikes=tape.stack(spikes, axis=1),
        presynaptic=tape.stack(delayed, axis=1),
        surrogate=tape.stack(factors, axis=1),
    )
