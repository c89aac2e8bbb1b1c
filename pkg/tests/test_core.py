"""
End-to-end tests for the experiment manager of l2l-pcm.
"""

import tempfile
import unittest
from pathlib import Path

from l2l_pcm import ExperimentManager
from l2l_pcm.config import (
    AnalogConfig,
    EpropConfig,
    ExperimentConfig,
    MamlConfig,
    TrajectoryConfig,
)
from l2l_pcm.experiment_manager import resolve_budget, run_experiment
from l2l_pcm.utils.persistence import MetricsSink


def _maml_config(output_dir, **overrides):
    maml = MamlConfig(
        n_way=2,
        k_shot=1,
        inner_steps=1,
        image_size=8,
        filters=2,
        meta_batch=2,
        iterations=1,
        eval_tasks=2,
        validation_tasks=2,
        validation_every=1,
        checkpoint_every=1,
        synthetic_classes=40,
        augment_rotations=False,
    )
    return ExperimentConfig(
        kind="maml", output_dir=str(output_dir), maml=maml, **overrides
    )


def _eprop_config(output_dir, **overrides):
    eprop = EpropConfig(
        trainee_neurons=6,
        lsg_neurons=8,
        batch_size=2,
        iterations=1,
        eval_trajectories=1,
        checkpoint_every=1,
    )
    return ExperimentConfig(
        kind="eprop",
        output_dir=str(output_dir),
        eprop=eprop,
        trajectory=TrajectoryConfig(workspace_samples=3),
        **overrides,
    )


class TestBudget(unittest.TestCase):
    """Desk-size versus full-size runs."""

    def test_full_budget_resets_sizes(self):
        """--full restores the full network sizes and iteration counts only."""
        config = ExperimentConfig(
            full_budget=True,
            maml=MamlConfig(iterations=3, filters=2, n_way=3),
            eprop=EpropConfig(lsg_neurons=5),
        )
        resolved = resolve_budget(config)
        self.assertEqual(resolved.maml.iterations, 30000)
        self.assertEqual(resolved.maml.filters, 56)
        self.assertEqual(resolved.maml.n_way, 3)
        self.assertEqual(resolved.eprop.lsg_neurons, 800)
        self.assertEqual(resolved.trajectory.workspace_samples, 10000)

    def test_desk_budget_untouched(self):
        """Without --full the config is used as given."""
        config = ExperimentConfig(maml=MamlConfig(iterations=3))
        self.assertIs(resolve_budget(config), config)


class TestMamlExperiment(unittest.TestCase):
    """Few-shot classification from training to evaluation."""

    def test_train_and_evaluate(self):
        """A tiny run writes metrics, checkpoints and an accuracy table."""
        with tempfile.TemporaryDirectory() as tmp:
            manager = ExperimentManager(_maml_config(tmp))
            results = manager.run()
            out = Path(tmp)
            self.assertTrue((out / "resolved_config.toml").is_file())
            self.assertTrue((out / "checkpoints" / "maml_final.ckpt").is_file())
            self.assertTrue((out / "checkpoints" / "maml_000001.ckpt").is_file())
            self.assertEqual(len(manager.sink.read("maml_train")), 1)
            self.assertEqual(len(manager.sink.read("maml_eval")), 4)
        self.assertEqual(len(results["table"].rows), 4)
        self.assertEqual(results["table"].backend, "software-32bit")

    def test_evaluate_from_checkpoint(self):
        """An evaluate-only run picks up the final checkpoint of the same directory."""
        with tempfile.TemporaryDirectory() as tmp:
            ExperimentManager(_maml_config(tmp)).run(["train"])
            results = ExperimentManager(_maml_config(tmp)).run(["evaluate"])
            again = ExperimentManager(_maml_config(tmp)).run(["evaluate"])
        self.assertEqual(results["table"].rows, again["table"].rows)

    def test_runs_are_reproducible(self):
        """Two runs with the same seed write identical metric files."""
        streams = []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                self.assertEqual(run_experiment(_maml_config(tmp, seed=4)), 0)
                streams.append(
                    [
                        (Path(tmp) / f"{family}.csv").read_text(encoding="utf-8")
                        for family in ("maml_train", "maml_eval")
                    ]
                )
        self.assertEqual(streams[0], streams[1])


class TestEpropExperiment(unittest.TestCase):
    """One-shot motor learning from training to crossbar evaluation."""

    def test_train_and_evaluate_on_crossbar(self):
        """The crossbar evaluation reprograms the trainee once per trajectory."""
        with tempfile.TemporaryDirectory() as tmp:
            analog = AnalogConfig(cores=1)
            config = _eprop_config(tmp, backend="crossbar", analog=analog)
            manager = ExperimentManager(config)
            results = manager.run()
            sink = MetricsSink(tmp)
            events = sink.read("events")
            train_rows = manager.sink.read("eprop_train")
            self.assertTrue((Path(tmp) / "checkpoints" / "eprop_final.ckpt").is_file())
            self.assertTrue((Path(tmp) / "dumps" / "trajectory_0.csv").is_file())
            self.assertTrue((Path(tmp) / "dumps" / "spikes.csv").is_file())
        self.assertEqual(len(train_rows), 1)
        self.assertEqual(
            set(train_rows[0]),
            {"iteration", "lr", "loss", "rate_trainee_hz", "rate_lsg_hz"},
        )
        self.assertEqual(len(results["table"].rows), 2)
        self.assertEqual(sum(e["event"] == "reprogram" for e in events), 1)

    def test_generate_trajectories(self):
        """Target dumps land next to the run artifacts."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = ExperimentManager(_eprop_config(tmp)).generate_trajectories(3)
            self.assertEqual(
                [p.name for p in paths],
                ["target_0.csv", "target_1.csv", "target_2.csv"],
            )
            lines = paths[0].read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 251)
        self.assertTrue(lines[1].endswith(",target"))


if __name__ == "__main__":
    unittest.main()
