"""
Meta-training and few-shot evaluation for l2l-pcm.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from l2l_pcm.config import AnalogConfig, MamlConfig
from l2l_pcm.crossbar.quantize import quantize_stochastic
from l2l_pcm.errors import NonFiniteError, UsageError
from l2l_pcm.grad.optim import AdamState, adam_step
from l2l_pcm.grad.tape import Tape, Tensor
from l2l_pcm.maml.cnn import (
    CnnParams,
    CrossbarCnn,
    Quantizer,
    build_features,
    delta_rule,
    delta_update,
    software_features,
)
from l2l_pcm.maml.data import Episode, GlyphDataset, sample_task
from l2l_pcm.memory.memory_manager import MemoryManager
from l2l_pcm.utils.persistence import (
    MAML_MAGIC,
    MetricsSink,
    load_checkpoint,
    save_checkpoint,
)
from l2l_pcm.utils.rng import SeedBank, ordered_map

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

BACKENDS = ("software-32bit", "software-4bit", "crossbar")
EVAL_HEADER = ("task", "step", "accuracy", "backend")


def tape_quantizer(
    config: MamlConfig, rng: Optional[np.random.Generator]
) -> Optional[Quantizer]:
    """Straight-through stochastic rounding for 4-bit training, None for 32-bit."""
    if config.weight_mode != "4bit-stochastic":
        return None
    if rng is None:
        raise UsageError("4-bit mode needs a generator for the rounding draws")
    return lambda tape, tensor: tape.quantize(tensor, config.quant_levels, rng)


def quantize_array(
    values: np.ndarray, levels: int, rng: np.random.Generator
) -> np.ndarray:
    """Max-abs scale, stochastically round to ``levels`` per sign, rescale."""
    peak = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if peak == 0.0:
        return np.array(values, copy=True)
    rounded = quantize_stochastic(values / peak, levels, rng) * peak
    return rounded.astype(np.asarray(values).dtype)


def build_episode_tape(
    params: CnnParams,
    episode: Episode,
    config: MamlConfig,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
    inner_steps: Optional[int] = None,
    inner_lr: Optional[float] = None,
    first_order: Optional[bool] = None,
) -> Tape:
    """
    Record the unrolled inner loop of one episode.

    Support and query features come from the same conv stack; the dense
    layer takes ``inner_steps`` delta-rule updates on the support set, and
    the first output is the query cross-entropy of the adapted weights.

    Args:
        params: Initial parameters; every tensor becomes a tape parameter
        episode: Support and query sets
        config: Inner learning rate, steps, weight mode
        rng: Rounding draws in 4-bit mode
        dtype: Tape precision
        inner_steps: Overrides ``config.inner_steps``
        inner_lr: Overrides ``config.inner_lr``
        first_order: Overrides ``config.first_order``

    Returns:
        tape: Evaluated tape; outputs are (query loss, adapted dense weights)
    """
    steps = config.inner_steps if inner_steps is None else inner_steps
    lr = config.inner_lr if inner_lr is None else inner_lr
    first_order = config.first_order if first_order is None else first_order
    quantizer = tape_quantizer(config, rng)

    tape = Tape(dtype)
    tensors: Dict[str, Tensor] = {
        name: tape.parameter(v, name) for name, v in params.as_dict().items()
    }
    support_x = tape.input(episode.support_x, "support_x")
    query_x = tape.input(episode.query_x, "query_x")
    support_y = tape.constant(episode.support_y, "support_y")
    query_y = tape.constant(episode.query_y, "query_y")

    hs = build_features(tape, tensors, support_x, params.blocks, quantizer)
    hq = build_features(tape, tensors, query_x, params.blocks, quantizer)
    dense = tensors["dense.w"]
    for _ in range(steps):
        dense = delta_rule(tape, hs, dense, support_y, lr, first_order, quantizer)

    w = quantizer(tape, dense) if quantizer is not None else dense
    loss = tape.cross_entropy(tape.softmax(tape.matmul(hq, w)), query_y)
    tape.mark_output(loss, dense)
    return tape


def _dump_episode(
    directory: Union[str, Path], params: CnnParams, episode: Episode
) -> Path:
    tensors = dict(params.as_dict())
    tensors.update(
        {
            "episode.support_x": episode.support_x,
            "episode.support_y": episode.support_y,
            "episode.query_x": episode.query_x,
            "episode.query_y": episode.query_y,
        }
    )
    path = Path(directory) / "nonfinite_episode.ckpt"
    return save_checkpoint(path, tensors, MAML_MAGIC)


def outer_step(
    params: CnnParams,
    episodes: Sequence[Episode],
    config: MamlConfig,
    state: AdamState,
    rng: Optional[np.random.Generator] = None,
    dump_dir: Optional[Union[str, Path]] = None,
    memory: Optional[MemoryManager] = None,
    workers: Optional[int] = None,
) -> Tuple[CnnParams, float]:
    """
    One meta-update: unrolled tapes per episode, averaged gradients, one Adam step.

    Episodes may run on parallel workers; gradients are reduced in episode
    order, so the result does not depend on the worker count.

    Args:
        params: Current initialization theta
        episodes: Meta-batch
        config: Training hyperparameters
        state: Adam state over every tensor in ``params``
        rng: Source of per-episode rounding seeds (4-bit mode)
        dump_dir: Where a failing episode is written before re-raising
        memory: Optional tape-size tracker
        workers: Worker cap (defaults to L2L_THREADS)

    Returns:
        params: Updated parameters
        loss: Mean query loss of the batch before the update
    """
    if not episodes:
        raise UsageError("outer_step needs at least one episode")
    rng = rng or np.random.default_rng(0)
    seeds = rng.integers(0, 2**63 - 1, size=len(episodes))

    def run(job: Tuple[Episode, int]) -> Tuple[float, Dict[str, np.ndarray]]:
        episode, seed = job
        try:
            episode_rng = np.random.default_rng(int(seed))
            tape = build_episode_tape(params, episode, config, episode_rng)
            if memory is not None:
                memory.track_tape(tape)
            loss = float(tape.outputs[0].data)
            return loss, tape.backward()
        except NonFiniteError:
            if dump_dir is not None:
                path = _dump_episode(dump_dir, params, episode)
                logger.error("Non-finite meta-loss; episode written to %s", path)
            raise

    results = ordered_map(run, list(zip(episodes, seeds)), workers)
    mean_loss = float(np.mean([loss for loss, _ in results]))
    if not np.isfinite(mean_loss):
        raise NonFiniteError("non-finite meta-loss")

    table = params.as_dict()
    grads = {name: np.zeros_like(value) for name, value in table.items()}
    for _, episode_grads in results:
        for name, g in episode_grads.items():
            grads[name] += g
    for name in grads:
        grads[name] /= len(results)

    return CnnParams.from_dict(adam_step(state, table, grads)), mean_loss


def episode_loss(
    params: CnnParams,
    episode: Episode,
    config: MamlConfig,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Query loss after inner adaptation, without gradients."""
    return float(build_episode_tape(params, episode, config, rng).outputs[0].data)


@dataclass
class MetaTrainResult:
    """Parameters and loss curves of a meta-training run."""

    params: CnnParams
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Tuple[int, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def save_maml_checkpoint(
    path: Union[str, Path],
    params: CnnParams,
    state: Optional[AdamState] = None,
    iteration: int = 0,
) -> Path:
    tensors = dict(params.as_dict())
    if state is not None:
        tensors.update(state.arrays())
    tensors["iteration"] = np.array([iteration], dtype=np.float32)
    return save_checkpoint(path, tensors, MAML_MAGIC)


def load_maml_checkpoint(
    path: Union[str, Path]
) -> Tuple[CnnParams, Dict[str, np.ndarray], int]:
    """
    Read a meta-training checkpoint.

    Returns:
        params: Network parameters
        table: Full tensor table (Adam moments included, when present)
        iteration: Outer iterations completed
    """
    table = load_checkpoint(path, MAML_MAGIC)
    names = {
        n: v
        for n, v in table.items()
        if not n.startswith(("adam.", "episode.")) and n != "iteration"
    }
    iteration = int(table["iteration"].ravel()[0]) if "iteration" in table else 0
    return CnnParams.from_dict(names), table, iteration


def meta_train(
    params: CnnParams,
    train: GlyphDataset,
    val: GlyphDataset,
    config: MamlConfig,
    bank: SeedBank,
    sink: Optional[MetricsSink] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    memory: Optional[MemoryManager] = None,
    state: Optional[AdamState] = None,
    start_iteration: int = 0,
) -> MetaTrainResult:
    """
    Run the outer loop for ``config.iterations`` iterations.

    Every iteration draws its own meta-batch from the named seed stream, so
    a resumed run sees the same episodes as an uninterrupted one. The
    validation loss is measured on a fixed episode set every
    ``validation_every`` iterations.

    Args:
        params: Initial parameters
        train: Meta-training split
        val: Validation split
        config: Training hyperparameters
        bank: Seed streams of the run
        sink: Receives (iteration, train_loss, val_loss) rows as ``maml_train``
        checkpoint_dir: Periodic and final checkpoints go here
        memory: Memory guard (a default one is created when omitted)
        state: Adam state to resume from
        start_iteration: Iterations already completed

    Returns:
        result: Final parameters and loss curves
    """
    result = MetaTrainResult(params=params)
    if config.iterations <= start_iteration:
        logger.info("No outer iterations to run")
        return result

    memory = memory or MemoryManager()
    state = state or AdamState(params.as_dict(), lr=config.outer_lr)
    val_rng = bank.generator("maml.validation")
    val_episodes = [
        sample_task(val, config.n_way, config.k_shot, val_rng)
        for _ in range(config.validation_tasks)
    ]
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    progress = tqdm(
        range(start_iteration, config.iterations), desc="meta-train", disable=None
    )
    for iteration in progress:
        with memory.optimize_memory():
            task_rng = bank.generator("maml.tasks", iteration)
            episodes = [
                sample_task(train, config.n_way, config.k_shot, task_rng)
                for _ in range(config.meta_batch)
            ]
            params, loss = outer_step(
                params, episodes, config, state,
                rng=bank.generator("maml.rounding", iteration),
                dump_dir=checkpoint_dir,
                memory=memory,
            )
        result.train_loss.append(loss)

        done = iteration + 1
        val_loss = None
        if done % config.validation_every == 0 or done == config.iterations:
            val_rounding = bank.generator("maml.validation.rounding")
            losses = [
                episode_loss(params, e, config, val_rounding) for e in val_episodes
            ]
            val_loss = float(np.mean(losses))
            result.val_loss.append((done, val_loss))
            progress.set_postfix(train=f"{loss:.3f}", val=f"{val_loss:.3f}")
        if sink is not None:
            sink.write(
                "maml_train",
                {"iteration": done, "train_loss": loss, "val_loss": val_loss},
            )
        if checkpoint_dir is not None and done % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"maml_{done:06d}.ckpt"
            result.checkpoints.append(save_maml_checkpoint(path, params, state, done))

    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "maml_final.ckpt"
        final = save_maml_checkpoint(path, params, state, config.iterations)
        result.checkpoints.append(final)
    memory.log_memory_usage()
    logger.info("Meta-training finished at loss %.4f", result.train_loss[-1])
    result.params = params
    return result


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.argmax(labels, axis=-1)))


StepCallback = Callable[[int, np.ndarray], None]


def inner_adapt(
    params: CnnParams,
    support_x: np.ndarray,
    support_y: np.ndarray,
    lr: float,
    steps: int,
    backend: str = "software",
    model: Optional[CrossbarCnn] = None,
    on_step: Optional[StepCallback] = None,
    features: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """
    Adapt the dense layer to a support set with the delta rule.

    Conv weights are never touched. On the crossbar backend features and
    logits are read from the cores and the dense layer is reprogrammed
    after every step.

    Args:
        params: Initialization theta (only ``dense`` is adapted)
        support_x: (B, H, W, 1) support images
        support_y: (B, N) one-hot labels
        lr: Step size alpha
        steps: Number of updates n
        backend: ``software`` or ``crossbar``
        model: Deployed network (crossbar backend)
        on_step: Called with (step, weights) for step 0..n
        features: Precomputed support features

    Returns:
        weights: Dense weights after 0..n updates
    """
    if len(support_x) == 0:
        raise UsageError("support set is empty")
    if backend == "crossbar":
        if model is None:
            raise UsageError("crossbar backend needs a deployed model")
        h = model.features(support_x) if features is None else features
    elif backend == "software":
        h = software_features(params, support_x) if features is None else features
    else:
        raise UsageError(f"unknown inner-loop backend {backend!r}")

    h = np.asarray(h, dtype=np.float64)
    weights = [np.asarray(params.dense, dtype=np.float64).copy()]
    if on_step is not None:
        on_step(0, weights[0])
    for step in range(1, steps + 1):
        current = weights[-1]
        logits = model.logits(h) if backend == "crossbar" else None
        updated = current + delta_update(h, current, support_y, lr, logits=logits)
        if backend == "crossbar":
            model.set_dense(updated)
        weights.append(updated)
        if on_step is not None:
            on_step(step, updated)
    return weights


class AccuracyTable:
    """Per-task, per-step query accuracies of one backend."""

    def __init__(self, backend: str, steps: int):
        self.backend = backend
        self.steps = steps
        self.rows: List[Tuple[int, int, float, str]] = []

    def add(self, task: int, step: int, value: float) -> None:
        self.rows.append((task, step, value, self.backend))

    def by_step(self) -> np.ndarray:
        """(tasks, steps + 1) accuracy matrix."""
        tasks = sorted({r[0] for r in self.rows})
        table = np.zeros((len(tasks), self.steps + 1))
        index = {t: i for i, t in enumerate(tasks)}
        for task, step, value, _ in self.rows:
            table[index[task], step] = value
        return table

    def summary(self) -> List[Tuple[int, float, float]]:
        """(step, mean, std) over tasks."""
        table = self.by_step()
        if table.size == 0:
            return []
        return [
            (j, float(table[:, j].mean()), float(table[:, j].std()))
            for j in range(self.steps + 1)
        ]

    def final_accuracy(self) -> float:
        summary = self.summary()
        return summary[-1][1] if summary else float("nan")


def evaluate(
    params: CnnParams,
    test: GlyphDataset,
    config: MamlConfig,
    backend: str,
    bank: SeedBank,
    analog: Optional[AnalogConfig] = None,
    sink: Optional[MetricsSink] = None,
    dump_dir: Optional[Union[str, Path]] = None,
    tasks: Optional[int] = None,
    model: Optional[CrossbarCnn] = None,
) -> AccuracyTable:
    """
    Few-shot accuracy on held-out tasks after 0..n inner updates.

    Tasks come from the ``maml.eval`` seed stream, so every backend sees the
    same episodes. The crossbar backend programs the network once and
    reprograms only the dense layer; with a drift factor above 1 the cores
    drift (and are recalibrated if configured) before the first task.

    Args:
        params: Meta-trained parameters
        test: Held-out split
        config: Inner-loop settings and task count
        backend: ``software-32bit``, ``software-4bit`` or ``crossbar``
        bank: Seed streams of the run
        analog: Crossbar settings
        sink: Receives ``maml_eval`` rows
        dump_dir: Crossbar backend writes ``dense_step{j}.ckpt`` of task 0 here
        tasks: Overrides ``config.eval_tasks``
        model: Already deployed network to reuse

    Returns:
        table: Accuracy rows and per-step summary
    """
    if backend not in BACKENDS:
        raise UsageError(
            f"unknown backend {backend!r}; expected one of {', '.join(BACKENDS)}"
        )
    tasks = config.eval_tasks if tasks is None else tasks
    analog = analog or AnalogConfig()
    table = AccuracyTable(backend, config.inner_steps)
    rounding = bank.generator("maml.eval.rounding")

    if backend == "crossbar" and model is None:
        rngs = [bank.generator("crossbar", i) for i in range(analog.cores)]
        model = CrossbarCnn.deploy(params, analog, rngs, sink, context={"task": None})
        if analog.drift_time_factor > 1.0:
            model.deployment.apply_drift(analog.drift_time_factor)
            if analog.recalibrate_after_drift:
                model.deployment.calibrate(probes=analog.calibration_probes)

    task_rng = bank.generator("maml.eval")
    for task in tqdm(range(tasks), desc=f"evaluate {backend}", disable=None):
        episode = sample_task(test, config.n_way, config.k_shot, task_rng)
        if model is not None:
            model.deployment.context = {"task": task}

        if backend == "crossbar":
            if task > 0:
                model.set_dense(params.dense)
            hq = model.features(episode.query_x)

            def score(step: int, weights: np.ndarray) -> None:
                table.add(task, step, accuracy(model.logits(hq), episode.query_y))
                if task == 0 and dump_dir is not None:
                    save_checkpoint(
                        Path(dump_dir) / f"dense_step{step}.ckpt",
                        {"dense.w": model.read_dense()},
                        MAML_MAGIC,
                    )

            inner_adapt(params, episode.support_x, episode.support_y, config.inner_lr,
                        config.inner_steps, "crossbar", model, score)
            continue

        source = params
        if backend == "software-4bit":
            source = CnnParams.from_dict(
                {
                    n: quantize_array(v, config.quant_levels, rounding)
                    for n, v in params.as_dict().items()
                }
            )
        hs = software_features(source, episode.support_x)
        hq = software_features(source, episode.query_x)

        def score(step: int, weights: np.ndarray) -> None:
            if backend == "software-4bit":
                weights = quantize_array(weights, config.quant_levels, rounding)
            table.add(task, step, accuracy(hq @ weights, episode.query_y))

        inner_adapt(source, episode.support_x, episode.support_y, config.inner_lr,
                    config.inner_steps, "software", on_step=score, features=hs)

    if sink is not None:
        sink.write_many(
            "maml_eval", (dict(zip(EVAL_HEADER, row)) for row in table.rows)
        )
    for step, mean, std in table.summary():
        logger.info("%s step %d: accuracy %.4f +- %.4f", backend, step, mean, std)
    return table
