"""
Tests for configuration, persistence, seeding and the command line of l2l-pcm.
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from l2l_pcm.cli import build_parser, exit_code, main
from l2l_pcm.config import dump_config, parse_config, parse_config_text
from l2l_pcm.errors import (
    CapacityError,
    ConfigError,
    DatasetError,
    L2LError,
    NonFiniteError,
    SafetyLimitError,
    UsageError,
)
from l2l_pcm.grad.tape import Tape
from l2l_pcm.memory import MemoryManager
from l2l_pcm.utils.histograms import select_weights, weight_histograms
from l2l_pcm.utils.persistence import (
    EPROP_MAGIC,
    MAML_MAGIC,
    MetricsSink,
    load_checkpoint,
    save_checkpoint,
)
from l2l_pcm.utils.rng import SeedBank, ordered_map


class TestConfig(unittest.TestCase):
    """TOML experiment configs."""

    def test_defaults(self):
        """An empty document gives the default experiment."""
        config = parse_config_text("")
        self.assertEqual(config.kind, "maml")
        self.assertEqual(config.backend, "software-32bit")
        self.assertEqual(config.maml.n_way, 5)
        self.assertEqual(config.eprop.trainee_neurons, 250)
        self.assertEqual(config.analog.weight_levels, 15)
        self.assertAlmostEqual(config.safety.angle_limit, 0.9)

    def test_sections_and_round_trip(self):
        """Section values are read and survive a dump and reparse."""
        text = '\n'.join(
            [
                'kind = "eprop"',
                "seed = 7",
                "[eprop]",
                "trainee_neurons = 12",
                "[analog]",
                "prog_noise_sigma = 0.0",
            ]
        )
        config = parse_config_text(text)
        self.assertEqual(
            (config.kind, config.seed, config.eprop.trainee_neurons), ("eprop", 7, 12)
        )
        self.assertEqual(parse_config_text(dump_config(config)), config)

    def test_misspelled_key(self):
        """An unknown key is reported with its dotted name and line."""
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text("seed = 1\n[maml]\ninner_lrr = 0.1\n")
        self.assertEqual(ctx.exception.key, "maml.inner_lrr")
        self.assertEqual(ctx.exception.line, 3)

    def test_invalid_value(self):
        """Out-of-range values and fixed settings are refused."""
        with self.assertRaises(ConfigError):
            parse_config_text("[analog]\ninput_bits = 6\n")
        with self.assertRaises(ConfigError):
            parse_config_text("[eprop]\ntrial_steps = 100\n")
        with self.assertRaises(ConfigError):
            parse_config_text('backend = "tpu"\n')

    def test_bad_toml(self):
        """Broken TOML raises a config error."""
        with self.assertRaises(ConfigError):
            parse_config_text("seed = = 1\n")

    def test_missing_file(self):
        """A missing config file is a config error."""
        with self.assertRaises(ConfigError):
            parse_config("/nonexistent/experiment.toml")

    def test_echo(self):
        """Reading with an echo directory writes the resolved config."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "exp.toml"
            path.write_text("seed = 3\n", encoding="utf-8")
            config = parse_config(path, echo_dir=tmp)
            echoed = parse_config(Path(tmp) / "resolved_config.toml")
        self.assertEqual(echoed, config)


class TestPersistence(unittest.TestCase):
    """Checkpoints and metric streams."""

    def test_checkpoint_round_trip(self):
        """Tensors come back as float32 with names and shapes intact."""
        tensors = {
            "conv1.w": np.arange(6, dtype=np.float64).reshape(1, 2, 3),
            "dense.b": np.ones(5),
        }
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "a.ckpt", tensors, MAML_MAGIC)
            restored = load_checkpoint(path, MAML_MAGIC)
            self.assertEqual(list(restored), ["conv1.w", "dense.b"])
            np.testing.assert_array_equal(restored["conv1.w"], tensors["conv1.w"])
            self.assertEqual(restored["dense.b"].dtype, np.float32)
            with self.assertRaises(UsageError):
                load_checkpoint(path, EPROP_MAGIC)
        with self.assertRaises(UsageError):
            load_checkpoint(Path(tmp) / "a.ckpt")

    def test_metrics_sink(self):
        """The first row fixes the header; later rows may omit but not add columns."""
        with tempfile.TemporaryDirectory() as tmp:
            sink = MetricsSink(tmp)
            sink.write("train", {"iteration": 0, "loss": 0.5})
            sink.write("train", {"iteration": 1})
            with self.assertRaises(UsageError):
                sink.write("train", {"iteration": 2, "accuracy": 0.1})
            rows = sink.read("train")
            text = sink.path("train").read_text(encoding="utf-8")
        self.assertEqual(
            rows,
            [{"iteration": "0", "loss": "0.5"}, {"iteration": "1", "loss": ""}],
        )
        self.assertTrue(text.startswith("iteration,loss\n"))
        self.assertEqual(sink.read("missing"), [])

    def test_resumed_sink_appends(self):
        """A second sink on the same directory keeps earlier rows and the header."""
        with tempfile.TemporaryDirectory() as tmp:
            first = MetricsSink(tmp)
            for i in range(3):
                first.write("train", {"iteration": i, "loss": 0.5})
            resumed = MetricsSink(tmp)
            resumed.write("train", {"iteration": 3, "loss": 0.25})
            with self.assertRaises(UsageError):
                resumed.write("train", {"iteration": 4, "accuracy": 0.9})
            rows = resumed.read("train")
            lines = resumed.path("train").read_text(encoding="utf-8").splitlines()
        self.assertEqual([r["iteration"] for r in rows], ["0", "1", "2", "3"])
        self.assertEqual(rows[-1]["loss"], "0.25")
        self.assertEqual(lines.count("iteration,loss"), 1)


class TestSeeding(unittest.TestCase):
    """Named seed streams and ordered pools."""

    def test_streams_are_reproducible_and_independent(self):
        """Same name and index give the same draws; other names differ."""
        a = SeedBank(11).generator("maml.tasks", 2).random(4)
        b = SeedBank(11).generator("maml.tasks", 2).random(4)
        c = SeedBank(11).generator("maml.tasks", 3).random(4)
        d = SeedBank(12).generator("maml.tasks", 2).random(4)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))
        self.assertFalse(np.array_equal(a, d))

    def test_ordered_map(self):
        """Results keep input order with several workers."""
        squares = ordered_map(lambda v: v * v, range(6), workers=3)
        self.assertEqual(squares, [0, 1, 4, 9, 16, 25])


class TestHistograms(unittest.TestCase):
    """Weight-magnitude histograms."""

    def test_growing_weights_fill_the_last_bin(self):
        """The first snapshot sets the scale, so grown weights land in the last bin."""
        first = np.linspace(-1.0, 1.0, 10)
        rows = weight_histograms([("a", first), ("b", first * 3.0)], bins=5)
        self.assertEqual(len(rows), 10)
        self.assertEqual(sum(r.count for r in rows if r.checkpoint == "a"), 10)
        last = [r for r in rows if r.checkpoint == "b"]
        self.assertEqual(last[-1].count, 8)
        self.assertAlmostEqual(last[-1].cumulative_fraction, 1.0)

    def test_constant_weights(self):
        """Equal magnitudes all fall in the last bin."""
        rows = weight_histograms([("a", np.full(7, -0.2))], bins=4)
        self.assertEqual([r.count for r in rows], [0, 0, 0, 7])

    def test_shape_change(self):
        """Snapshots must share a shape."""
        with self.assertRaises(UsageError):
            weight_histograms([("a", np.ones(3)), ("b", np.ones(4))])

    def test_selection(self):
        """Globs pick tensors in name order; no match is an error."""
        tensors = {
            "dense.w": np.ones((2, 2)),
            "dense.b": np.zeros(2),
            "conv1.w": np.ones(3),
        }
        np.testing.assert_array_equal(
            select_weights(tensors, "dense.*"), [0, 0, 1, 1, 1, 1]
        )
        with self.assertRaises(UsageError):
            select_weights(tensors, "lsg.*")


class TestCli(unittest.TestCase):
    """Command parsing and exit codes."""

    def test_exit_codes(self):
        """Each failure class maps to its own code."""
        self.assertEqual(exit_code(ConfigError("x")), 2)
        self.assertEqual(exit_code(DatasetError("x")), 3)
        self.assertEqual(exit_code(UsageError("x")), 4)
        self.assertEqual(exit_code(NonFiniteError("x")), 5)
        self.assertEqual(exit_code(CapacityError("x")), 6)
        self.assertEqual(exit_code(SafetyLimitError("x", 0, 0, 1.0)), 7)
        self.assertEqual(exit_code(L2LError("x")), 1)

    def test_parser(self):
        """Subcommands share the common flags."""
        args = build_parser().parse_args(
            ["maml-eval", "--backend", "crossbar", "--seed", "4", "--full"]
        )
        self.assertEqual(
            (args.command, args.backend, args.seed, args.full),
            ("maml-eval", "crossbar", 4, True),
        )

    def test_missing_config_exit_code(self):
        """A missing config file exits with the config code."""
        self.assertEqual(main(["maml-train", "--config", "/nonexistent/exp.toml"]), 2)

    def test_traj_gen(self):
        """traj-gen writes one CSV per target."""
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "exp.toml"
            config.write_text("[trajectory]\nworkspace_samples = 3\n", encoding="utf-8")
            status = main(
                ["traj-gen", "--config", str(config), "--out", tmp, "--count", "2"]
            )
            written = sorted(p.name for p in (Path(tmp) / "trajectories").iterdir())
            target = Path(tmp) / "trajectories" / "target_0.csv"
            header = target.read_text(encoding="utf-8").splitlines()[0]
        self.assertEqual(status, 0)
        self.assertEqual(written, ["target_0.csv", "target_1.csv"])
        self.assertEqual(header, "step,phi1,phi2,angle1,angle2,x,y,z,series")

    def test_hist(self):
        """hist writes bins rows per checkpoint."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for i in range(2):
                tensors = {
                    "dense.w": np.linspace(-1, 1, 8) * (i + 1),
                    "conv1.w": np.ones(3),
                }
                path = save_checkpoint(Path(tmp) / f"ckpt_{i}.ckpt", tensors)
                paths.append(str(path))
            status = main(
                ["hist", *paths, "--select", "dense.*", "--bins", "4", "--out", tmp]
            )
            histograms = Path(tmp) / "histograms.csv"
            lines = histograms.read_text(encoding="utf-8").splitlines()
        self.assertEqual(status, 0)
        self.assertEqual(lines[0], "checkpoint,bin,count,fraction,cumulative_fraction")
        self.assertEqual(len(lines), 9)


class TestMemoryManager(unittest.TestCase):
    """Tape footprint tracking."""

    def test_track_tape(self):
        """The peak tape size is kept."""
        manager = MemoryManager(tape_budget_mb=0.001)
        small = Tape(np.float64)
        small.input(np.zeros(10), "x")
        large = Tape(np.float64)
        large.input(np.zeros(1000), "x")
        self.assertGreaterEqual(manager.track_tape(large), 8000)
        manager.track_tape(small)
        self.assertGreaterEqual(manager.peak_tape_bytes, 8000)
        self.assertIn("peak_tape_bytes", manager.get_memory_usage())

    def test_optimize_memory(self):
        """The context manager passes exceptions through."""
        manager = MemoryManager()
        with self.assertRaises(UsageError):
            with manager.optimize_memory():
                raise UsageError("boom")


if __name__ == "__main__":
    unittest.main()
