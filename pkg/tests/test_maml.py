"""
Tests for the few-shot classification pipeline of l2l-pcm.
"""

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from l2l_pcm.config import AnalogConfig, MamlConfig
from l2l_pcm.errors import DatasetError, UsageError
from l2l_pcm.grad import AdamState, Tape, finite_diff_check
from l2l_pcm.maml import (
    CrossbarCnn,
    build_episode_tape,
    delta_update,
    evaluate,
    init_cnn,
    inner_adapt,
    load_maml_checkpoint,
    load_omniglot,
    meta_train,
    sample_task,
    synthetic_glyphs,
)
from l2l_pcm.maml.cnn import software_features
from l2l_pcm.maml.data import GlyphDataset, split_dataset
from l2l_pcm.utils import MetricsSink, SeedBank


def _tiny_config(**overrides):
    values = dict(
        n_way=2, k_shot=1, inner_steps=2, inner_lr=0.5, image_size=8, filters=2
    )
    values.update(overrides)
    return MamlConfig(**values)


def _glyphs(seed):
    return synthetic_glyphs(n_classes=6, examples_per_class=4, image_size=8, seed=seed)


class TestEpisodes(unittest.TestCase):
    """Datasets, splits and task sampling."""

    def setUp(self):
        """Set up a small synthetic dataset."""
        self.dataset = _glyphs(3)

    def test_synthetic_glyphs_are_deterministic(self):
        """The same seed renders the same glyphs."""
        again = _glyphs(3)
        for a, b in zip(self.dataset.classes, again.classes):
            np.testing.assert_array_equal(a.images, b.images)
        self.assertEqual(self.dataset.classes[0].images.shape, (4, 8, 8))
        self.assertLessEqual(float(self.dataset.classes[0].images.max()), 1.0)

    def test_sample_task_shapes(self):
        """Support and query hold N*K images with permuted one-hot labels."""
        episode = sample_task(self.dataset, 3, 2, np.random.default_rng(0))
        self.assertEqual(episode.support_x.shape, (6, 8, 8, 1))
        self.assertEqual(episode.query_x.shape, (6, 8, 8, 1))
        self.assertEqual(episode.support_y.shape, (6, 3))
        self.assertEqual(episode.n_way, 3)
        np.testing.assert_array_equal(episode.support_y.sum(axis=0), [2, 2, 2])
        np.testing.assert_array_equal(episode.support_y, episode.query_y)
        self.assertEqual(len(set(episode.classes)), 3)

    def test_sample_task_errors(self):
        """Too few classes or examples raise a DatasetError."""
        with self.assertRaises(DatasetError):
            sample_task(self.dataset, 7, 1, np.random.default_rng(0))
        with self.assertRaises(DatasetError):
            sample_task(self.dataset, 2, 3, np.random.default_rng(0))

    def test_rotations_and_splits(self):
        """Rotation quadruples the classes; splits partition them."""
        rotated = self.dataset.rotated()
        self.assertEqual(len(rotated), 24)
        self.assertTrue(rotated.class_ids[1].endswith("@rot90"))
        np.testing.assert_array_equal(
            rotated.classes[2].images,
            np.rot90(self.dataset.classes[0].images, k=2, axes=(1, 2)),
        )
        big = GlyphDataset(self.dataset.classes * 20)
        train, val, test = split_dataset(big)
        self.assertEqual(len(train) + len(val) + len(test), len(big))
        self.assertGreater(len(train), len(test))


class TestOmniglotLoader(unittest.TestCase):
    """Reading an alphabet/character/*.png tree."""

    def _write_png(self, path, ink_at=(2, 3)):
        pixels = np.full((8, 8), 255, dtype=np.uint8)
        pixels[ink_at] = 0
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path)

    def test_load_skips_bad_classes(self):
        """Classes with missing or unreadable images are excluded; ink decodes to 1."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            for k in range(3):
                self._write_png(root / "Alpha" / "char01" / f"{k}.png")
            for k in range(2):
                self._write_png(root / "Alpha" / "char02" / f"{k}.png")
            for k in range(2):
                self._write_png(root / "Beta" / "char01" / f"{k}.png")
            (root / "Beta" / "char01" / "2.png").write_bytes(b"not an image")

            dataset = load_omniglot(root, image_size=8, examples_per_class=3)
            self.assertEqual(dataset.class_ids, ["Alpha/char01"])
            image = dataset.classes[0].images[0]
            self.assertAlmostEqual(float(image[2, 3]), 1.0, places=5)
            self.assertAlmostEqual(float(image[0, 0]), 0.0, places=5)

            cache = json.loads((root / "classes.json").read_text())
            self.assertIn("Beta/char01", cache["classes"])

            manifest = root / "subset.txt"
            manifest.write_text("Alpha/char01\nGamma/char09\n")
            with self.assertRaises(DatasetError):
                load_omniglot(
                    root, manifest=manifest, image_size=8, examples_per_class=3
                )

    def test_missing_root(self):
        """A missing root is a dataset error."""
        with self.assertRaises(DatasetError):
            load_omniglot("/nonexistent/omniglot")


class TestInnerLoop(unittest.TestCase):
    """Delta rule and dense-only adaptation."""

    def setUp(self):
        """Set up a tiny network and episode."""
        self.config = _tiny_config()
        self.dataset = _glyphs(3)
        self.episode = sample_task(self.dataset, 2, 1, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        self.params = init_cnn(rng, filters=4, channels=1, classes=2)

    def test_delta_update_is_a_gradient_step(self):
        """Over 100 random batches the delta rule is -alpha times the CE gradient."""
        for case in range(100):
            rng = np.random.default_rng(case)
            batch = int(rng.integers(1, 9))
            features = int(rng.integers(1, 17))
            classes = int(rng.integers(2, 6))
            h = rng.normal(size=(batch, features))
            w = rng.normal(size=(features, classes))
            y = np.eye(classes)[rng.integers(0, classes, size=batch)]
            alpha = float(rng.uniform(0.01, 1.0))
            tape = Tape(dtype=np.float64)
            dense = tape.parameter(w, "w")
            logits = tape.matmul(tape.constant(h), dense)
            tape.mark_output(tape.cross_entropy(tape.softmax(logits), tape.constant(y)))
            grad = tape.backward()["w"]
            with self.subTest(case=case):
                np.testing.assert_allclose(
                    delta_update(h, w, y, alpha), -alpha * grad, atol=1e-10
                )

    def test_inner_adapt_touches_only_dense(self):
        """Adaptation returns n+1 dense snapshots and leaves the conv stack alone."""
        before = self.params.fingerprint("conv")
        dense = self.params.dense.copy()
        weights = inner_adapt(
            self.params, self.episode.support_x, self.episode.support_y, 0.5, 3
        )
        self.assertEqual(len(weights), 4)
        self.assertEqual(self.params.fingerprint("conv"), before)
        np.testing.assert_array_equal(self.params.dense, dense)

        h = software_features(self.params, self.episode.support_x).astype(np.float64)
        expected = weights[0] + delta_update(h, weights[0], self.episode.support_y, 0.5)
        np.testing.assert_allclose(weights[1], expected, rtol=1e-5, atol=1e-6)

    def test_label_permutation_invariance(self):
        """Relabelling an episode permutes the adapted dense columns the same way."""
        episode = sample_task(self.dataset, 3, 1, np.random.default_rng(6))
        params = init_cnn(np.random.default_rng(7), filters=4, channels=1, classes=3)
        perm = np.array([2, 0, 1])
        relabelled = params.copy()
        relabelled.dense = params.dense[:, perm].copy()

        weights = inner_adapt(params, episode.support_x, episode.support_y, 0.5, 3)
        permuted = inner_adapt(
            relabelled, episode.support_x, episode.support_y[:, perm], 0.5, 3
        )
        for plain, swapped in zip(weights, permuted):
            np.testing.assert_allclose(swapped, plain[:, perm], atol=1e-12)

    def test_inner_adapt_errors(self):
        """An empty support set or a missing crossbar model is refused."""
        with self.assertRaises(UsageError):
            inner_adapt(
                self.params,
                self.episode.support_x[:0],
                self.episode.support_y[:0],
                0.5,
                1,
            )
        with self.assertRaises(UsageError):
            inner_adapt(
                self.params,
                self.episode.support_x,
                self.episode.support_y,
                0.5,
                1,
                backend="crossbar",
            )


class TestMetaGradient(unittest.TestCase):
    """Differentiating through the unrolled inner loop."""

    def setUp(self):
        """Set up a two-block network on 8x8 glyphs."""
        dataset = _glyphs(5)
        self.episode = sample_task(dataset, 2, 1, np.random.default_rng(0))
        self.params = init_cnn(
            np.random.default_rng(1), filters=2, channels=1, classes=2, blocks=2
        )
        self.config = _tiny_config()

    def test_second_order_gradient(self):
        """The meta-gradient through two delta-rule steps passes the FD check.

        Every parameter is checked, the conv stack included.
        """
        tape = build_episode_tape(
            self.params, self.episode, self.config, dtype=np.float64
        )
        self.assertEqual(len(tape.outputs), 2)
        names = set(tape.backward())
        expected = {"conv1.w", "conv1.b", "bn1.gamma", "conv2.w", "dense.w"}
        self.assertTrue(expected <= names)
        # Small step keeps the differences off max-pool and ReLU kinks.
        error = finite_diff_check(tape, step=1e-6, floor=1e-4)
        self.assertLess(error, 1e-3)

    def test_first_order_drops_the_update_term(self):
        """The first-order variant gives a different dense gradient."""
        full = build_episode_tape(
            self.params, self.episode, self.config, dtype=np.float64
        ).backward()
        first = build_episode_tape(
            self.params, self.episode, self.config, dtype=np.float64, first_order=True
        ).backward()
        self.assertFalse(
            np.allclose(full["dense.w"], first["dense.w"], rtol=1e-6, atol=1e-9)
        )
        self.assertEqual(full["bn2.beta"].shape, (2,))


class TestMetaTraining(unittest.TestCase):
    """Outer loop, checkpoints and resumption."""

    def setUp(self):
        """Set up a tiny dataset and configuration."""
        self.dataset = _glyphs(3)
        self.config = _tiny_config(
            inner_steps=1,
            meta_batch=2,
            iterations=2,
            validation_every=1,
            validation_tasks=2,
            checkpoint_every=1,
        )
        rng = np.random.default_rng(0)
        self.params = init_cnn(rng, filters=2, channels=1, classes=2)

    def test_train_and_resume(self):
        """A resumed run ends on the same parameters as an uninterrupted one."""
        with tempfile.TemporaryDirectory() as tmp:
            sink = MetricsSink(tmp)
            result = meta_train(
                self.params,
                self.dataset,
                self.dataset,
                self.config,
                SeedBank(0),
                sink,
                Path(tmp) / "ckpt",
            )
            self.assertEqual(len(result.train_loss), 2)
            self.assertEqual([it for it, _ in result.val_loss], [1, 2])
            self.assertEqual(len(result.checkpoints), 3)
            self.assertEqual(len(sink.read("maml_train")), 2)

            first = Path(tmp) / "ckpt" / "maml_000001.ckpt"
            params, table, iteration = load_maml_checkpoint(first)
            self.assertEqual(iteration, 1)
            state = AdamState(params.as_dict(), lr=self.config.outer_lr)
            state.load_arrays(table)
            resumed = meta_train(
                params,
                self.dataset,
                self.dataset,
                self.config,
                SeedBank(0),
                state=state,
                start_iteration=1,
            )
        np.testing.assert_array_equal(resumed.params.dense, result.params.dense)
        np.testing.assert_array_equal(resumed.params.conv_w[0], result.params.conv_w[0])


class TestEvaluation(unittest.TestCase):
    """Accuracy tables on each backend."""

    def setUp(self):
        """Set up a tiny network and test split."""
        self.dataset = _glyphs(3)
        self.config = _tiny_config(filters=4)
        rng = np.random.default_rng(0)
        self.params = init_cnn(rng, filters=4, channels=1, classes=2)

    def test_software_rows_and_determinism(self):
        """Each task yields n+1 rows and reruns give the same accuracies."""
        with tempfile.TemporaryDirectory() as tmp:
            sink = MetricsSink(tmp)
            table = evaluate(
                self.params,
                self.dataset,
                self.config,
                "software-32bit",
                SeedBank(0),
                sink=sink,
                tasks=3,
            )
            self.assertEqual(len(table.rows), 9)
            self.assertEqual(len(sink.read("maml_eval")), 9)
        again = evaluate(
            self.params,
            self.dataset,
            self.config,
            "software-32bit",
            SeedBank(0),
            tasks=3,
        )
        self.assertEqual(table.rows, again.rows)
        self.assertEqual(table.by_step().shape, (3, 3))

    def test_four_bit_backend(self):
        """The 4-bit backend produces accuracies in [0, 1]."""
        table = evaluate(
            self.params,
            self.dataset,
            self.config,
            "software-4bit",
            SeedBank(0),
            tasks=2,
        )
        self.assertEqual(len(table.rows), 6)
        self.assertTrue(all(0.0 <= row[2] <= 1.0 for row in table.rows))

    def test_crossbar_reprograms_only_dense(self):
        """The conv stack is programmed once; the dense layer per step and task."""
        analog = AnalogConfig(cores=1)
        model = CrossbarCnn.deploy(self.params, analog, [np.random.default_rng(0)])
        table = evaluate(
            self.params,
            self.dataset,
            self.config,
            "crossbar",
            SeedBank(0),
            analog=analog,
            tasks=2,
            model=model,
        )
        self.assertEqual(len(table.rows), 6)
        events = model.deployment
        self.assertEqual(events.count_events("program"), 5)
        self.assertEqual(events.count_events("reprogram"), 5)
        self.assertEqual(events.count_events("reprogram", "dense"), 5)

    def test_unknown_backend(self):
        """Backends outside the known three are refused."""
        with self.assertRaises(UsageError):
            evaluate(
                self.params, self.dataset, self.config, "gpu", SeedBank(0), tasks=1
            )


if __name__ == "__main__":
    unittest.main()
