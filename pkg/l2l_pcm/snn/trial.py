"""
Two-phase motor trials for l2l-pcm.

Tasks, the differentiable trial tape and the reference simulator.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from l2l_pcm.config import AnalogConfig, EpropConfig, SafetyLimits, TrajectoryConfig
from l2l_pcm.deploy.deployment import Deployment
from l2l_pcm.deploy.placement import LayerSpec, plan_placement
from l2l_pcm.errors import UsageError
from l2l_pcm.grad.tape import Tape, Tensor
from l2l_pcm.robot.kinematics import DhParams, Trajectory
from l2l_pcm.robot.trajectory import (
    PositionEncoder,
    WorkspaceBox,
    clock_signal,
    encoder_period,
    gen_target_trajectory,
)
from l2l_pcm.snn.networks import EpropParams, lsg_cell, trainee_cell
from l2l_pcm.snn.neurons import NeuronState, neuron_step, record_population
from l2l_pcm.snn.plasticity import (
    EligibilityHistory,
    EligibilityState,
    LearningSignalState,
    eligibility_update,
    inner_one_shot_update,
    learning_signal_update,
    off_diagonal,
    record_one_shot_update,
)
from l2l_pcm.utils.persistence import MetricsSink

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TRAINEE_LAYER = "trainee"


@dataclass
class MotorTask:
    """Inputs and target of one trial.

    Clock (T, clock), LSG input (T, lsg inputs) and the target motion.
    """

    clock: np.ndarray
    lsg_input: np.ndarray
    target: Trajectory


class MotorTaskFactory:
    """Draws target motions and encodes them as LSG input spikes."""

    def __init__(
        self,
        config: EpropConfig,
        trajectory: TrajectoryConfig,
        safety: SafetyLimits,
        box: WorkspaceBox,
        dh: Optional[DhParams] = None,
    ):
        """
        Initialize the MotorTaskFactory.

        Args:
            config: Trial length, step and clock width
            trajectory: Generator and encoder settings
            safety: Safeguards for generated targets
            box: Workspace bounds of the position encoder
            dh: Arm description
        """
        self.config = config
        self.trajectory = trajectory
        self.safety = safety
        self.dh = dh or DhParams()
        self.dt = config.dt_ms / 1000.0
        period = encoder_period(trajectory.encoder_rate_hz, self.dt)
        self.encoder = PositionEncoder(box, trajectory.regions_per_dim, period)
        self.clock = clock_signal(config.trial_steps, config.clock_neurons, period)
        logger.info(
            "MotorTaskFactory initialized with %d clock and %d position neurons",
            config.clock_neurons, self.encoder.neurons,
        )

    def from_target(self, target: Trajectory) -> MotorTask:
        parts = [self.clock]
        if self.config.lsg_private_clock:
            parts.append(self.clock)
        parts.append(self.encoder.encode(target.positions))
        return MotorTask(self.clock, np.concatenate(parts, axis=1), target)

    def sample(self, rng: np.random.Generator) -> MotorTask:
        target = gen_target_trajectory(
            rng, self.trajectory, self.safety, self.dh, self.config.trial_steps, self.dt
        )
        return self.from_target(target)


@dataclass
class TaskBatch:
    inputs: np.ndarray
    lsg_inputs: np.ndarray
    velocities: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def stack_tasks(tasks: Sequence[MotorTask]) -> TaskBatch:
    if not tasks:
        raise UsageError("empty task batch")
    return TaskBatch(
        inputs=np.stack([t.clock for t in tasks]),
        lsg_inputs=np.stack([t.lsg_input for t in tasks]),
        velocities=np.stack([t.target.velocities for t in tasks]),
        positions=np.stack([t.target.positions for t in tasks]),
    )


def mean_rate_hz(spikes: np.ndarray, dt: float) -> np.ndarray:
    """Per-neuron firing rate over the time axis (-2) in Hz."""
    return np.asarray(spikes).mean(axis=-2) / dt


def outer_loss(
    positions: np.ndarray,
    velocities: np.ndarray,
    target_positions: np.ndarray,
    target_velocities: np.ndarray,
    rates: Sequence[tuple],
    config: EpropConfig,
) -> float:
    """
    Tracking loss of the adapted trainee plus rate regularization.

    Args:
        positions: (B, T, 3) produced end-effector positions (cm)
        velocities: (B, T, 2) produced angular velocities (rad/s)
        target_positions: Same shape as ``positions``
        target_velocities: Same shape as ``velocities``
        rates: (rates (B, N) in Hz, target rate) per network
        config: Term weights and regularization coefficient

    Returns:
        loss: Mean over the batch
    """
    batch = positions.shape[0]
    position_error = np.sum((positions - target_positions) ** 2)
    loss = config.trajectory_weight * position_error / batch
    velocity_error = np.sum((velocities - target_velocities) ** 2)
    loss += config.velocity_weight * velocity_error / batch
    for rate, target in rates:
        loss += config.reg_coeff * np.sum((np.asarray(rate) - target) ** 2) / batch
    return float(loss)


@dataclass
class TrialTape:
    """A recorded batch of two-phase trials; ``loss`` is the first output."""

    tape: Tape
    loss: Tensor
    pre_velocities: Tensor
    post_velocities: Tensor
    positions: Tensor
    trainee_spikes: List[Tensor]
    lsg_spikes: Tensor
    w_in1: Tensor
    w_rec1: Tensor
    terms: Dict[str, Tensor] = field(default_factory=dict)


def _squared_error(
    tape: Tape, produced: Tensor, target: np.ndarray, weight: float
) -> Tensor:
    diff = tape.sub(produced, target)
    return tape.scale(tape.sum(tape.mul(diff, diff)), weight)


def build_trial_tape(
    params: EpropParams,
    batch: TaskBatch,
    config: EpropConfig,
    dh: Optional[DhParams] = None,
    dtype=np.float32,
    smooth_spikes: bool = False,
    inner_lr: Optional[float] = None,
) -> TrialTape:
    """
    Record both phases of a batch of trials with the one-shot update in between.

    Phase one runs the learning-signal generator and the trainee on the
    clock input and accumulates L * e; the update yields per-trial weights;
    phase two runs the trainee alone on the same clock. The loss compares
    the phase-two motion with the target.

    Args:
        params: theta and psi; each tensor becomes a tape parameter
        batch: Inputs and targets
        config: Network constants and loss weights
        dh: Arm description
        dtype: Tape precision
        smooth_spikes: Verification mode (see ``Tape``)
        inner_lr: Overrides ``config.inner_lr``

    Returns:
        trial: Tape plus handles of the interesting tensors
    """
    dh = dh or DhParams()
    lr = config.inner_lr if inner_lr is None else inner_lr
    dt = config.dt_ms / 1000.0
    size, steps = batch.inputs.shape[:2]
    n = params.trainee_neurons

    tape = Tape(dtype, smooth_spikes=smooth_spikes)
    p = {name: tape.parameter(value, name) for name, value in params.as_dict().items()}
    x = tape.input(batch.inputs, "inputs")
    x_lsg = tape.input(batch.lsg_inputs, "lsg_inputs")
    mask_trainee = tape.constant(off_diagonal(n))
    mask_lsg = tape.constant(off_diagonal(params.lsg_neurons))
    cell, cell_lsg = trainee_cell(config), lsg_cell(config)

    lsg = record_population(
        tape,
        tape.matmul(x_lsg, p["lsg.w_in"]),
        tape.mul(p["lsg.w_rec"], mask_lsg),
        cell_lsg,
    )
    signals = tape.exp_filter(
        tape.matmul(lsg.spikes, p["lsg.psi_out"]), config.signal_decay
    )

    w_rec = tape.mul(p["trainee.w_rec"], mask_trainee)
    first = record_population(tape, tape.matmul(x, p["trainee.w_in"]), w_rec, cell)
    pre = tape.exp_filter(
        tape.matmul(first.spikes, p["trainee.w_out"]), config.readout_decay
    )

    w_in1, w_rec1 = record_one_shot_update(
        tape, p["trainee.w_in"], w_rec, x, first.presynaptic, first.surrogate, signals,
        config.membrane_decay, lr, mask_trainee,
    )
    second = record_population(tape, tape.matmul(x, w_in1), w_rec1, cell)
    post = tape.exp_filter(
        tape.matmul(second.spikes, p["trainee.w_out"]), config.readout_decay
    )
    angles = tape.exp_filter(tape.scale(post, dt), 1.0)
    positions = tape.kinematics(angles, dh)

    trajectory = _squared_error(
        tape, positions, batch.positions, config.trajectory_weight / size
    )
    velocity = _squared_error(
        tape, post, batch.velocities, config.velocity_weight / size
    )
    both = tape.add(tape.sum(first.spikes, axis=1), tape.sum(second.spikes, axis=1))
    rate_trainee = tape.scale(both, 1.0 / (2 * steps * dt))
    rate_lsg = tape.scale(tape.sum(lsg.spikes, axis=1), 1.0 / (steps * dt))
    reg_weight = config.reg_coeff / size
    target_trainee = np.full((size, n), config.f_target_trainee)
    target_lsg = np.full((size, params.lsg_neurons), config.f_target_lsg)
    reg = tape.add(
        _squared_error(tape, rate_trainee, target_trainee, reg_weight),
        _squared_error(tape, rate_lsg, target_lsg, reg_weight),
    )
    loss = tape.add(tape.add(trajectory, velocity), reg)
    tape.mark_output(loss, post, positions)

    return TrialTape(
        tape=tape,
        loss=loss,
        pre_velocities=pre,
        post_velocities=post,
        positions=positions,
        trainee_spikes=[first.spikes, second.spikes],
        lsg_spikes=lsg.spikes,
        w_in1=w_in1,
        w_rec1=w_rec1,
        terms={"trajectory": trajectory, "velocity": velocity, "regularization": reg},
    )


CurrentFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def software_current(
    x: np.ndarray, z: np.ndarray, w_in: np.ndarray, w_rec: np.ndarray
) -> np.ndarray:
    return x @ w_in + z @ w_rec


def trainee_matrix(w_in: np.ndarray, w_rec: np.ndarray) -> np.ndarray:
    """Input and recurrent weights stacked as one crossbar layer."""
    stacked = np.concatenate([w_in, w_rec * off_diagonal(w_rec.shape[0])], axis=0)
    return stacked.astype(np.float64)


def deploy_trainee(
    params: EpropParams,
    analog: Optional[AnalogConfig] = None,
    rngs: Optional[Sequence[np.random.Generator]] = None,
    sink: Optional[MetricsSink] = None,
    context: Optional[dict] = None,
) -> Deployment:
    """Place and program the trainee's stacked input and recurrent weights."""
    analog = analog or AnalogConfig()
    w_in, w_rec = params["trainee.w_in"], params["trainee.w_rec"]
    spec = LayerSpec(
        name=TRAINEE_LAYER, rows=w_in.shape[0] + w_rec.shape[0], cols=w_rec.shape[1]
    )
    plan = plan_placement([spec], analog.cores)
    deployment = Deployment(plan, analog, rngs, sink, context)
    deployment.program_layer(TRAINEE_LAYER, trainee_matrix(w_in, w_rec))
    return deployment


def crossbar_current(deployment: Deployment) -> CurrentFn:
    """Currents read from the cores; the weight arguments are ignored."""

    def current(
        x: np.ndarray, z: np.ndarray, w_in: np.ndarray, w_rec: np.ndarray
    ) -> np.ndarray:
        return deployment.dispatch_mvm(TRAINEE_LAYER, np.concatenate([x, z]))

    return current


@dataclass
class TrialResult:
    """Outcome of one simulated trial."""

    pre_velocities: np.ndarray
    post_velocities: np.ndarray
    w_in1: np.ndarray
    w_rec1: np.ndarray
    trainee_spikes: List[np.ndarray]
    lsg_spikes: np.ndarray
    signals: np.ndarray


def _readout(spikes: np.ndarray, w_out: np.ndarray, decay: float) -> np.ndarray:
    out = np.zeros((spikes.shape[0], w_out.shape[1]))
    y = np.zeros(w_out.shape[1])
    for t in range(spikes.shape[0]):
        y = decay * y + spikes[t] @ w_out
        out[t] = y
    return out


def _run_trainee(x: np.ndarray, w_in, w_rec, cell, current_fn: CurrentFn):
    steps, n = x.shape[0], w_rec.shape[0]
    state = NeuronState.zeros(n)
    spikes = np.zeros((steps, n))
    factors = np.zeros((steps, n))
    delayed = np.zeros((steps, n))
    for t in range(steps):
        delayed[t] = state.z
        state, h = neuron_step(state, current_fn(x[t], state.z, w_in, w_rec), cell)
        spikes[t], factors[t] = state.z, h
    return spikes, factors, delayed


def run_trial(
    params: EpropParams,
    task: MotorTask,
    config: EpropConfig,
    backend: str = "software",
    deployment: Optional[Deployment] = None,
    current_fn: Optional[CurrentFn] = None,
    inner_lr: Optional[float] = None,
) -> TrialResult:
    """
    Simulate one two-phase trial step by step in numpy.

    The learning-signal generator and the readout always run in software;
    the trainee's synaptic currents come from ``current_fn`` (software
    matmuls, or the cores on the crossbar backend). Eligibilities are
    computed from the produced spikes, and on the crossbar backend the
    updated weights are reprogrammed once before phase two.

    Args:
        params: theta and psi
        task: Clock, LSG input and target
        config: Network constants
        backend: ``software`` or ``crossbar``
        deployment: Programmed trainee layer (crossbar backend)
        current_fn: Override for the trainee current computation
        inner_lr: Overrides ``config.inner_lr``

    Returns:
        result: Pre/post readouts, updated weights and spike trains
    """
    lr = config.inner_lr if inner_lr is None else inner_lr
    if backend == "crossbar":
        if deployment is None:
            raise UsageError("crossbar backend needs a deployed trainee")
        current_fn = current_fn or crossbar_current(deployment)
    elif backend != "software":
        raise UsageError(f"unknown trial backend {backend!r}")
    current_fn = current_fn or software_current

    x = np.asarray(task.clock, dtype=np.float64)
    x_lsg = np.asarray(task.lsg_input, dtype=np.float64)
    steps = x.shape[0]
    w_in = params["trainee.w_in"].astype(np.float64)
    w_rec = params["trainee.w_rec"].astype(np.float64)
    w_rec = w_rec * off_diagonal(params.trainee_neurons)
    w_out = params["trainee.w_out"].astype(np.float64)
    lsg_in = params["lsg.w_in"].astype(np.float64)
    lsg_rec = params["lsg.w_rec"].astype(np.float64) * off_diagonal(params.lsg_neurons)
    psi = params["lsg.psi_out"].astype(np.float64)
    cell, cell_lsg = trainee_cell(config), lsg_cell(config)

    lsg_state = NeuronState.zeros(params.lsg_neurons)
    signal = LearningSignalState.zeros(params.trainee_neurons)
    lsg_spikes = np.zeros((steps, params.lsg_neurons))
    signals = np.zeros((steps, params.trainee_neurons))
    for t in range(steps):
        drive = x_lsg[t] @ lsg_in + lsg_state.z @ lsg_rec
        lsg_state, _ = neuron_step(lsg_state, drive, cell_lsg)
        signal = learning_signal_update(signal, lsg_state.z, psi, config.signal_decay)
        lsg_spikes[t], signals[t] = lsg_state.z, signal.signal

    spikes1, factors, delayed = _run_trainee(x, w_in, w_rec, cell, current_fn)
    trace = EligibilityState.zeros(x.shape[1], params.trainee_neurons)
    states = []
    for t in range(steps):
        trace = eligibility_update(
            trace, x[t], delayed[t], factors[t], config.membrane_decay
        )
        states.append(trace)
    history = EligibilityHistory.stack(states)
    w_in1, w_rec1 = inner_one_shot_update(w_in, w_rec, signals, history, lr)

    if backend == "crossbar":
        deployment.reprogram_region(TRAINEE_LAYER, trainee_matrix(w_in1, w_rec1))
    spikes2, _, _ = _run_trainee(x, w_in1, w_rec1, cell, current_fn)

    return TrialResult(
        pre_velocities=_readout(spikes1, w_out, config.readout_decay),
        post_velocities=_readout(spikes2, w_out, config.readout_decay),
        w_in1=w_in1,
        w_rec1=w_rec1,
        trainee_spikes=[spikes1, spikes2],
        lsg_spikes=lsg_spikes,
        signals=signals,
    )
