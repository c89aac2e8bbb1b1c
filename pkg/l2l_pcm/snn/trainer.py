"""
Outer-loop training and evaluation of the one-shot motor learner for l2l-pcm.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from l2l_pcm.config import AnalogConfig, EpropConfig, SafetyLimits
from l2l_pcm.errors import NonFiniteError, UsageError
from l2l_pcm.grad.optim import AdamState, adam_step
from l2l_pcm.memory.memory_manager import MemoryManager
from l2l_pcm.robot.kinematics import DhParams, Trajectory, integrate_velocities
from l2l_pcm.robot.trajectory import trajectory_rmse
from l2l_pcm.snn.networks import EpropParams
from l2l_pcm.snn.trial import (
    TRAINEE_LAYER,
    MotorTask,
    MotorTaskFactory,
    TaskBatch,
    build_trial_tape,
    deploy_trainee,
    mean_rate_hz,
    run_trial,
    stack_tasks,
    trainee_matrix,
)
from l2l_pcm.utils.persistence import (
    EPROP_MAGIC,
    MetricsSink,
    load_checkpoint,
    save_checkpoint,
    write_csv,
)
from l2l_pcm.utils.rng import SeedBank, ordered_map, worker_count

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = (
    "step",
    "phi1",
    "phi2",
    "angle1",
    "angle2",
    "x",
    "y",
    "z",
    "series",
)
SPIKE_HEADER = ("network", "phase", "neuron", "step")


def _chunks(size: int, parts: int) -> List[slice]:
    bounds = np.linspace(0, size, min(parts, size) + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _dump_trials(
    directory: Union[str, Path], params: EpropParams, batch: TaskBatch
) -> Path:
    tensors = dict(params.as_dict())
    tensors.update(
        {
            "trial.inputs": batch.inputs,
            "trial.lsg_inputs": batch.lsg_inputs,
            "trial.velocities": batch.velocities,
            "trial.positions": batch.positions,
        }
    )
    path = Path(directory) / "nonfinite_trial.ckpt"
    return save_checkpoint(path, tensors, EPROP_MAGIC)


def eprop_outer_step(
    params: EpropParams,
    tasks: Sequence[MotorTask],
    config: EpropConfig,
    state: AdamState,
    dump_dir: Optional[Union[str, Path]] = None,
    memory: Optional[MemoryManager] = None,
    workers: Optional[int] = None,
    dh: Optional[DhParams] = None,
) -> Tuple[EpropParams, Dict[str, float]]:
    """
    One Adam step on theta and psi from a batch of two-phase trials.

    The batch is cut into one chunk per worker; chunk gradients are
    combined in chunk order, weighted by chunk size.

    Args:
        params: Current parameters
        tasks: Trials of this iteration
        config: Network and loss settings
        state: Adam state (with the learning-rate schedule)
        dump_dir: Where a failing batch is written before re-raising
        memory: Optional tape-size tracker
        workers: Worker cap (defaults to L2L_THREADS)
        dh: Arm description

    Returns:
        params: Updated parameters (recurrent diagonals stay zero)
        metrics: loss and mean firing rates of both networks before the update
    """
    batch = stack_tasks(tasks)
    workers = worker_count() if workers is None else workers
    dt = config.dt_ms / 1000.0

    def run(part: slice):
        sub = TaskBatch(
            batch.inputs[part],
            batch.lsg_inputs[part],
            batch.velocities[part],
            batch.positions[part],
        )
        try:
            trial = build_trial_tape(params, sub, config, dh)
        except NonFiniteError:
            if dump_dir is not None:
                path = _dump_trials(dump_dir, params, sub)
                logger.error("Non-finite trial loss; batch written to %s", path)
            raise
        if memory is not None:
            memory.track_tape(trial.tape)
        spikes = np.concatenate([s.data for s in trial.trainee_spikes], axis=1)
        rates = (
            float(mean_rate_hz(spikes, dt).mean()) * len(sub),
            float(mean_rate_hz(trial.lsg_spikes.data, dt).mean()) * len(sub),
        )
        return float(trial.loss.data) * len(sub), trial.tape.backward(), rates, len(sub)

    results = ordered_map(run, _chunks(len(batch), workers), workers)
    total = float(sum(r[3] for r in results))
    loss = sum(r[0] for r in results) / total
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite trial loss")

    table = params.as_dict()
    grads = {name: np.zeros_like(value) for name, value in table.items()}
    for _, part_grads, _, count in results:
        for name, g in part_grads.items():
            grads[name] += g * (count / total)

    updated = EpropParams.from_dict(adam_step(state, table, grads))
    updated.zero_diagonals()
    metrics = {
        "loss": loss,
        "rate_trainee_hz": sum(r[2][0] for r in results) / total,
        "rate_lsg_hz": sum(r[2][1] for r in results) / total,
    }
    return updated, metrics


@dataclass
class EpropTrainResult:
    params: EpropParams
    losses: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def save_eprop_checkpoint(
    path: Union[str, Path],
    params: EpropParams,
    state: Optional[AdamState] = None,
    iteration: int = 0,
) -> Path:
    tensors = dict(params.as_dict())
    if state is not None:
        tensors.update(state.arrays())
    tensors["iteration"] = np.array([iteration], dtype=np.float32)
    return save_checkpoint(path, tensors, EPROP_MAGIC)


def load_eprop_checkpoint(
    path: Union[str, Path]
) -> Tuple[EpropParams, Dict[str, np.ndarray], int]:
    """Parameters, full tensor table and completed iterations of a checkpoint."""
    table = load_checkpoint(path, EPROP_MAGIC)
    iteration = int(table["iteration"].ravel()[0]) if "iteration" in table else 0
    return EpropParams.from_dict(table), table, iteration


def eprop_meta_train(
    params: EpropParams,
    factory: MotorTaskFactory,
    config: EpropConfig,
    bank: SeedBank,
    sink: Optional[MetricsSink] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    memory: Optional[MemoryManager] = None,
    state: Optional[AdamState] = None,
    start_iteration: int = 0,
) -> EpropTrainResult:
    """
    Meta-train theta and psi with Adam through the unrolled two-phase trials.

    Args:
        params: Initial parameters
        factory: Source of target trajectories and encodings
        config: Batch size, iterations and learning-rate schedule
        bank: Seed streams of the run
        sink: Receives ``eprop_train`` rows (iteration, loss, mean rates)
        checkpoint_dir: Periodic and final checkpoints go here
        memory: Memory guard (a default one is created when omitted)
        state: Adam state to resume from
        start_iteration: Iterations already completed

    Returns:
        result: Final parameters and the loss curve
    """
    result = EpropTrainResult(params=params)
    if config.iterations <= start_iteration:
        logger.info("No outer iterations to run")
        return result

    memory = memory or MemoryManager()
    state = state or AdamState(
        params.as_dict(),
        lr=config.outer_lr,
        decay=config.lr_decay,
        decay_every=config.lr_decay_every,
    )
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    progress = tqdm(
        range(start_iteration, config.iterations),
        desc="e-prop meta-train",
        disable=None,
    )
    for iteration in progress:
        with memory.optimize_memory():
            rng = bank.generator("eprop.tasks", iteration)
            tasks = [factory.sample(rng) for _ in range(config.batch_size)]
            params, metrics = eprop_outer_step(
                params, tasks, config, state, checkpoint_dir, memory, dh=factory.dh
            )
        result.losses.append(metrics["loss"])
        progress.set_postfix(loss=f"{metrics['loss']:.3f}")

        done = iteration + 1
        if sink is not None:
            lr = state.effective_lr(state.step - 1)
            sink.write("eprop_train", {"iteration": done, "lr": lr, **metrics})
        if checkpoint_dir is not None and done % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"eprop_{done:06d}.ckpt"
            result.checkpoints.append(save_eprop_checkpoint(path, params, state, done))

    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "eprop_final.ckpt"
        final = save_eprop_checkpoint(path, params, state, config.iterations)
        result.checkpoints.append(final)
    memory.log_memory_usage()
    logger.info("e-prop meta-training finished at loss %.4f", result.losses[-1])
    result.params = params
    return result


def count_violations(trajectory: Trajectory, limits: SafetyLimits) -> int:
    """Steps x joints where the commanded motion leaves the safe range."""
    return int(
        np.count_nonzero(np.abs(trajectory.velocities) > limits.velocity_limit)
        + np.count_nonzero(np.abs(trajectory.angles) > limits.angle_limit)
    )


def trajectory_rows(trajectory: Trajectory, series: str) -> List[tuple]:
    return [
        (
            t,
            *trajectory.velocities[t],
            *trajectory.angles[t],
            *trajectory.positions[t],
            series,
        )
        for t in range(len(trajectory))
    ]


def spike_rows(network: str, phase: int, spikes: np.ndarray) -> List[tuple]:
    steps, neurons = np.nonzero(np.asarray(spikes) > 0)
    ordered = sorted(zip(steps, neurons), key=lambda p: (p[1], p[0]))
    return [(network, phase, int(n), int(t)) for t, n in ordered]


class RmseTable:
    """Per-trajectory tracking errors before and after the one-shot update."""

    columns = (
        "trajectory",
        "phase",
        "rmse_joint1",
        "rmse_joint2",
        "euclidean_cm",
        "violations",
        "backend",
    )

    def __init__(self, backend: str):
        self.backend = backend
        self.rows: List[Dict[str, object]] = []

    def add(
        self,
        index: int,
        phase: str,
        produced: Trajectory,
        target: Trajectory,
        violations: int,
    ) -> None:
        row = {"trajectory": index, "phase": phase}
        row.update(trajectory_rmse(produced, target).as_row())
        row.update({"violations": violations, "backend": self.backend})
        self.rows.append(row)

    def summary(self, phase: str) -> Dict[str, Tuple[float, float]]:
        """(mean, std) of every error column for one phase."""
        picked = [r for r in self.rows if r["phase"] == phase]
        out = {}
        for column in ("rmse_joint1", "rmse_joint2", "euclidean_cm"):
            values = np.array([r[column] for r in picked], dtype=np.float64)
            if values.size:
                out[column] = (float(values.mean()), float(values.std()))
            else:
                out[column] = (float("nan"), 0.0)
        return out


def eprop_evaluate(
    params: EpropParams,
    factory: MotorTaskFactory,
    config: EpropConfig,
    backend: str,
    bank: SeedBank,
    analog: Optional[AnalogConfig] = None,
    sink: Optional[MetricsSink] = None,
    dump_dir: Optional[Union[str, Path]] = None,
    trajectories: Optional[int] = None,
    tasks: Optional[Sequence[MotorTask]] = None,
) -> RmseTable:
    """
    Track held-out trajectories before and after one-shot learning.

    Safety limits are not enforced on produced motion; violations are
    counted per row instead. For the first trajectory the spike rasters
    and trainee weights before/after the update are dumped; every
    trajectory gets a target/pre/post CSV.

    Args:
        params: Meta-trained parameters
        factory: Target source (held-out ``eprop.eval`` seed stream)
        config: Network settings and trajectory count
        backend: ``software-32bit`` or ``crossbar``
        bank: Seed streams of the run
        analog: Crossbar settings
        sink: Receives ``eprop_eval`` rows
        dump_dir: Directory for CSV and checkpoint dumps
        trajectories: Overrides ``config.eval_trajectories``
        tasks: Explicit tasks instead of sampled ones

    Returns:
        table: Pre/post RMSE rows and summaries
    """
    if backend not in ("software-32bit", "software-4bit", "crossbar"):
        raise UsageError(f"unknown backend {backend!r}")
    if backend == "software-4bit":
        logger.warning(
            "4-bit weights are a few-shot setting; evaluating e-prop in 32-bit software"
        )
    count = config.eval_trajectories if trajectories is None else trajectories
    if tasks is None:
        rng = bank.generator("eprop.eval")
        tasks = [factory.sample(rng) for _ in range(count)]
    dump = Path(dump_dir) if dump_dir is not None else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)

    deployment = None
    if backend == "crossbar":
        analog = analog or AnalogConfig()
        rngs = [bank.generator("crossbar", i) for i in range(analog.cores)]
        deployment = deploy_trainee(
            params, analog, rngs, sink, context={"trajectory": None}
        )
        if analog.drift_time_factor > 1.0:
            deployment.apply_drift(analog.drift_time_factor)
            if analog.recalibrate_after_drift:
                deployment.calibrate(probes=analog.calibration_probes)

    table = RmseTable(backend)
    dt = factory.dt
    for index, task in enumerate(tqdm(tasks, desc=f"evaluate {backend}", disable=None)):
        if deployment is not None:
            deployment.context = {"trajectory": index}
            if index > 0:
                deployment.program_layer(
                    TRAINEE_LAYER,
                    trainee_matrix(params["trainee.w_in"], params["trainee.w_rec"]),
                )
        result = run_trial(
            params,
            task,
            config,
            "crossbar" if deployment is not None else "software",
            deployment,
        )
        pre = integrate_velocities(result.pre_velocities, dt=dt, dh=factory.dh)
        post = integrate_velocities(result.post_velocities, dt=dt, dh=factory.dh)
        table.add(index, "pre", pre, task.target, count_violations(pre, factory.safety))
        table.add(
            index, "post", post, task.target, count_violations(post, factory.safety)
        )

        if dump is None:
            continue
        rows = (
            trajectory_rows(task.target, "target")
            + trajectory_rows(pre, "pre")
            + trajectory_rows(post, "post")
        )
        write_csv(dump / f"trajectory_{index}.csv", TRAJECTORY_HEADER, rows)
        if index == 0:
            spikes = (
                spike_rows("trainee", 1, result.trainee_spikes[0])
                + spike_rows("trainee", 2, result.trainee_spikes[1])
                + spike_rows("lsg", 1, result.lsg_spikes)
            )
            write_csv(dump / "spikes.csv", SPIKE_HEADER, spikes)
            save_checkpoint(
                dump / "trainee_before.ckpt",
                {
                    "trainee.w_in": params["trainee.w_in"],
                    "trainee.w_rec": params["trainee.w_rec"],
                },
                EPROP_MAGIC,
            )
            save_checkpoint(
                dump / "trainee_after.ckpt",
                {"trainee.w_in": result.w_in1, "trainee.w_rec": result.w_rec1},
                EPROP_MAGIC,
            )

    if sink is not None:
        sink.write_many("eprop_eval", table.rows)
    for phase in ("pre", "post"):
        stats = table.summary(phase)
        logger.info(
            "%s %s-update: joint RMSE %.4f / %.4f rad/s, deviation %.2f +- %.2f cm",
            backend, phase, stats["rmse_joint1"][0], stats["rmse_joint2"][0],
            stats["euclidean_cm"][0], stats["euclidean_cm"][1],
        )
    return table
