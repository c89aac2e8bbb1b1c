"""
Experiment orchestration for l2l-pcm.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from l2l_pcm.config import (
    EpropConfig,
    ExperimentConfig,
    MamlConfig,
    TrajectoryConfig,
    echo_config,
)
from l2l_pcm.grad.optim import AdamState
from l2l_pcm.maml.cnn import CnnParams, init_cnn
from l2l_pcm.maml.data import prepare_splits
from l2l_pcm.maml.learner import (
    AccuracyTable,
    evaluate,
    load_maml_checkpoint,
    meta_train,
)
from l2l_pcm.memory.memory_manager import MemoryManager
from l2l_pcm.robot.kinematics import DhParams
from l2l_pcm.robot.trajectory import estimate_workspace
from l2l_pcm.snn.networks import EpropParams, init_eprop
from l2l_pcm.snn.trainer import (
    TRAJECTORY_HEADER,
    RmseTable,
    eprop_evaluate,
    eprop_meta_train,
    load_eprop_checkpoint,
    trajectory_rows,
)
from l2l_pcm.snn.trial import MotorTaskFactory
from l2l_pcm.utils.persistence import MetricsSink, write_csv
from l2l_pcm.utils.rng import SeedBank

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Fields reset to their full-size defaults by ``full_budget``.
FULL_BUDGET_FIELDS = {
    "maml": ("iterations", "meta_batch", "filters", "inner_steps", "eval_tasks"),
    "eprop": (
        "iterations",
        "batch_size",
        "trainee_neurons",
        "lsg_neurons",
        "eval_trajectories",
    ),
    "trajectory": ("workspace_samples",),
}
_SECTION_MODELS = {
    "maml": MamlConfig,
    "eprop": EpropConfig,
    "trajectory": TrajectoryConfig,
}

REFERENCE_VALUES = {
    "maml_train_loss": {"32bit": 0.163, "4bit-stochastic": 0.241},
    "eprop_joint_rmse": (0.0381, 0.0363),
    "eprop_deviation_cm": {"software-32bit": 2.21, "crossbar": 6.69},
}


def resolve_budget(config: ExperimentConfig) -> ExperimentConfig:
    """Return ``config`` with full-size networks and budgets if ``full_budget``."""
    if not config.full_budget:
        return config
    update = {}
    for section, names in FULL_BUDGET_FIELDS.items():
        model = _SECTION_MODELS[section]
        defaults = {name: model.model_fields[name].default for name in names}
        update[section] = getattr(config, section).model_copy(update=defaults)
    logger.info("Full budget: %s", {s: list(n) for s, n in FULL_BUDGET_FIELDS.items()})
    return config.model_copy(update=update)


class ExperimentManager:
    """
    Runs the stages of one experiment and owns its artifacts.

    Every random draw comes from one ``SeedBank`` keyed by the master seed;
    metric streams, checkpoints and dumps live under ``output_dir``.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        memory_manager: Optional[MemoryManager] = None,
    ):
        """
        Initialize the ExperimentManager.

        Args:
            config: Validated experiment configuration
            memory_manager: Memory guard shared by all stages
        """
        self.config = resolve_budget(config)
        self.output_dir = Path(self.config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        echo_config(self.config, self.output_dir)

        self.bank = SeedBank(self.config.seed)
        self.sink = MetricsSink(self.output_dir)
        self.memory_manager = memory_manager or MemoryManager()
        self.checkpoint_dir = self.output_dir / "checkpoints"
        self.dump_dir = self.output_dir / "dumps"
        self.dh = DhParams()

        self._splits: Optional[tuple] = None
        self._factory: Optional[MotorTaskFactory] = None

        logger.info(
            "ExperimentManager initialized with kind: %s, backend: %s, seed: %d, "
            "output: %s",
            self.config.kind,
            self.config.backend,
            self.config.seed,
            self.output_dir,
        )

    # Few-shot classification

    @property
    def splits(self) -> tuple:
        if self._splits is None:
            self._splits = prepare_splits(self.config.maml, seed=self.config.seed)
        return self._splits

    def _maml_checkpoint(self) -> Optional[Path]:
        if self.config.checkpoint:
            return Path(self.config.checkpoint)
        final = self.checkpoint_dir / "maml_final.ckpt"
        return final if final.is_file() else None

    def load_maml(self) -> CnnParams:
        """Parameters from the configured checkpoint, or a fresh initialization."""
        path = self._maml_checkpoint()
        if path is not None:
            params, _, iteration = load_maml_checkpoint(path)
            logger.info(
                "Loaded MAML parameters from %s (%d iterations)", path, iteration
            )
            return params
        maml = self.config.maml
        return init_cnn(self.bank.generator("maml.init"), maml.filters, 1, maml.n_way)

    def train_maml(self) -> CnnParams:
        """
        Meta-train the classifier, resuming from ``checkpoint`` when set.

        Returns:
            params: Meta-trained parameters
        """
        train, val, _ = self.splits
        maml = self.config.maml
        state, start = None, 0
        if self.config.checkpoint:
            params, table, start = load_maml_checkpoint(self.config.checkpoint)
            state = AdamState(params.as_dict(), lr=maml.outer_lr)
            state.load_arrays(table)
            logger.info("Resuming MAML meta-training at iteration %d", start)
        else:
            rng = self.bank.generator("maml.init")
            params = init_cnn(rng, maml.filters, 1, maml.n_way)
        result = meta_train(
            params, train, val, maml, self.bank, self.sink, self.checkpoint_dir,
            self.memory_manager, state, start,
        )
        if result.train_loss:
            self._report("maml final train loss", result.train_loss[-1],
                         REFERENCE_VALUES["maml_train_loss"][maml.weight_mode])
        return result.params

    def evaluate_maml(
        self, params: CnnParams, tasks: Optional[int] = None
    ) -> AccuracyTable:
        _, _, test = self.splits
        return evaluate(
            params,
            test,
            self.config.maml,
            self.config.backend,
            self.bank,
            analog=self.config.analog,
            sink=self.sink,
            dump_dir=self.dump_dir,
            tasks=tasks,
        )

    # One-shot motor learning

    @property
    def factory(self) -> MotorTaskFactory:
        if self._factory is None:
            box = estimate_workspace(
                self.bank.generator("eprop.workspace"),
                self.config.trajectory,
                self.config.safety,
                self.dh,
            )
            self._factory = MotorTaskFactory(
                self.config.eprop,
                self.config.trajectory,
                self.config.safety,
                box,
                self.dh,
            )
        return self._factory

    def _eprop_checkpoint(self) -> Optional[Path]:
        if self.config.checkpoint:
            return Path(self.config.checkpoint)
        final = self.checkpoint_dir / "eprop_final.ckpt"
        return final if final.is_file() else None

    def load_eprop(self) -> EpropParams:
        path = self._eprop_checkpoint()
        if path is not None:
            params, _, iteration = load_eprop_checkpoint(path)
            logger.info(
                "Loaded e-prop parameters from %s (%d iterations)", path, iteration
            )
            return params
        rng = self.bank.generator("eprop.init")
        return init_eprop(rng, self.config.eprop, self.config.trajectory)

    def train_eprop(self) -> EpropParams:
        eprop = self.config.eprop
        state, start = None, 0
        if self.config.checkpoint:
            params, table, start = load_eprop_checkpoint(self.config.checkpoint)
            state = AdamState(
                params.as_dict(),
                lr=eprop.outer_lr,
                decay=eprop.lr_decay,
                decay_every=eprop.lr_decay_every,
            )
            state.load_arrays(table)
            logger.info("Resuming e-prop meta-training at iteration %d", start)
        else:
            rng = self.bank.generator("eprop.init")
            params = init_eprop(rng, eprop, self.config.trajectory)
        result = eprop_meta_train(
            params, self.factory, eprop, self.bank, self.sink, self.checkpoint_dir,
            self.memory_manager, state, start,
        )
        return result.params

    def evaluate_eprop(
        self, params: EpropParams, trajectories: Optional[int] = None
    ) -> RmseTable:
        table = eprop_evaluate(
            params,
            self.factory,
            self.config.eprop,
            self.config.backend,
            self.bank,
            analog=self.config.analog,
            sink=self.sink,
            dump_dir=self.dump_dir,
            trajectories=trajectories,
        )
        stats = table.summary("post")
        joints = REFERENCE_VALUES["eprop_joint_rmse"]
        self._report("joint 1 RMSE (rad/s)", stats["rmse_joint1"][0], joints[0])
        self._report("joint 2 RMSE (rad/s)", stats["rmse_joint2"][0], joints[1])
        deviation = REFERENCE_VALUES["eprop_deviation_cm"].get(self.config.backend)
        if deviation is not None:
            self._report(
                "Euclidean deviation (cm)", stats["euclidean_cm"][0], deviation
            )
        return table

    def generate_trajectories(
        self, count: int, out_dir: Optional[Union[str, Path]] = None
    ) -> List[Path]:
        """
        Write ``count`` target trajectories as ``target_{i}.csv``.

        Args:
            count: Number of targets
            out_dir: Destination (defaults to ``<output_dir>/trajectories``)

        Returns:
            paths: Written files in order
        """
        out = Path(out_dir) if out_dir is not None else self.output_dir / "trajectories"
        rng = self.bank.generator("traj.gen")
        paths = []
        for i in range(count):
            task = self.factory.sample(rng)
            rows = trajectory_rows(task.target, "target")
            paths.append(write_csv(out / f"target_{i}.csv", TRAJECTORY_HEADER, rows))
        logger.info("Wrote %d target trajectories to %s", count, out)
        return paths

    # Stages

    def _report(self, what: str, measured: float, reference: float) -> None:
        if self.config.full_budget:
            logger.info("%s: measured %.4f, reference %.4f", what, measured, reference)

    def run(self, stages: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """
        Run the configured stages in order (training before evaluation).

        Args:
            stages: Overrides ``config.stages``

        Returns:
            results: ``params`` plus ``table`` when evaluation ran
        """
        stages = list(stages or self.config.stages)
        results: Dict[str, Any] = {}
        with self.memory_manager.optimize_memory():
            if self.config.kind == "maml":
                params = self.train_maml() if "train" in stages else self.load_maml()
                results["params"] = params
                if "evaluate" in stages:
                    results["table"] = self.evaluate_maml(params)
            else:
                params = self.train_eprop() if "train" in stages else self.load_eprop()
                results["params"] = params
                if "evaluate" in stages:
                    results["table"] = self.evaluate_eprop(params)
        logger.info("Experiment finished; artifacts in %s", self.output_dir)
        return results


def run_experiment(
    config: ExperimentConfig, stages: Optional[Sequence[str]] = None
) -> int:
    """
    Run one experiment end to end.

    Failures propagate as ``L2LError`` subclasses; the CLI maps them to exit
    codes.

    Returns:
        status: 0 on success
    """
    ExperimentManager(config).run(stages)
    return 0
