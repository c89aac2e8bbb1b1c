"""
Tests for the differentiation tape of l2l-pcm.
"""

import unittest

import numpy as np

from l2l_pcm.errors import NonFiniteError, ShapeError, UsageError
from l2l_pcm.grad import AdamState, Tape, adam_step, finite_diff_check


def _one_hot(labels, classes):
    return np.eye(classes)[labels]


class TestTapeGradients(unittest.TestCase):
    """Analytic gradients against central differences in 64-bit."""

    def setUp(self):
        """Set up a seeded generator."""
        self.rng = np.random.default_rng(7)

    def test_dense_softmax_cross_entropy(self):
        """Matmul, add, softmax and cross-entropy agree with finite differences."""
        tape = Tape(dtype=np.float64)
        x = tape.input(self.rng.normal(size=(4, 3)), name="x")
        w = tape.parameter(self.rng.normal(size=(3, 5)), name="w")
        b = tape.parameter(self.rng.normal(size=(5,)), name="b")
        y = tape.constant(_one_hot([0, 2, 4, 1], 5))
        tape.mark_output(tape.cross_entropy(tape.softmax(x @ w + b), y))

        self.assertLess(finite_diff_check(tape, step=1e-5, floor=1e-6), 1e-4)

    def test_conv_batchnorm_maxpool(self):
        """The convolutional block differentiates correctly end to end."""
        tape = Tape(dtype=np.float64)
        x = tape.input(self.rng.normal(size=(2, 5, 5, 1)))
        w = tape.parameter(self.rng.normal(size=(3, 3, 1, 2)), name="w")
        b = tape.parameter(self.rng.normal(size=(2,)), name="b")
        gamma = tape.parameter(self.rng.uniform(0.5, 1.5, size=(2,)), name="gamma")
        beta = tape.parameter(self.rng.normal(size=(2,)), name="beta")
        h = tape.batchnorm(tape.conv2d(x, w, b, stride=2), gamma, beta)
        pooled = tape.global_maxpool(h)
        y = tape.constant(_one_hot([1, 0], 2))
        tape.mark_output(tape.cross_entropy(tape.softmax(pooled), y))

        self.assertEqual(tape.value(h).shape, (2, 3, 3, 2))
        self.assertLess(finite_diff_check(tape, step=1e-5, floor=1e-6), 1e-4)

    def test_shape_ops(self):
        """Transpose, reshape, index, stack, mean and scale route gradients."""
        tape = Tape(dtype=np.float64)
        a = tape.parameter(self.rng.normal(size=(2, 3)), name="a")
        parts = [tape.index(a, (slice(None), k)) for k in range(3)]
        stacked = tape.stack(parts, axis=1)
        flat = tape.reshape(tape.transpose(stacked), (6,))
        squared = flat * flat
        tape.mark_output(tape.mean(squared) * 3.0)

        grads = tape.backward()
        np.testing.assert_allclose(grads["a"], tape.value("a"), rtol=1e-12)
        self.assertLess(finite_diff_check(tape, step=1e-5, floor=1e-6), 1e-4)

    def test_exp_filter_matches_loop(self):
        """The filter follows y[t] = decay * y[t-1] + x[t] with correct gradients."""
        x = self.rng.normal(size=(2, 6, 3))
        expected = np.zeros_like(x)
        for t in range(6):
            expected[:, t] = x[:, t] + (0.8 * expected[:, t - 1] if t else 0.0)

        tape = Tape(dtype=np.float64)
        p = tape.parameter(x, name="x")
        filtered = tape.exp_filter(p, 0.8)
        np.testing.assert_allclose(tape.value(filtered), expected, atol=1e-12)

        weights = tape.constant(self.rng.normal(size=(2, 6, 3)))
        tape.mark_output(tape.sum(filtered * weights))
        self.assertLess(finite_diff_check(tape, step=1e-5, floor=1e-6), 1e-4)

    def test_weight_update_second_order(self):
        """The update term is differentiated unless first_order is set."""
        cases = (
            (False, lambda w: 1.0 - 0.2 * w),
            (True, lambda w: np.ones_like(w)),
        )
        for first_order, expected in cases:
            tape = Tape(dtype=np.float64)
            w = tape.parameter(np.array([0.5, -1.0, 2.0]), name="w")
            updated = tape.weight_update(w, w * w, lr=0.1, first_order=first_order)
            tape.mark_output(tape.sum(updated))
            grads = tape.backward()
            np.testing.assert_allclose(
                grads["w"], expected(tape.value("w")), atol=1e-12
            )

    def test_weight_update_broadcasts_over_batch(self):
        """A shared weight accumulates the gradient of every batch slice."""
        tape = Tape(dtype=np.float64)
        w = tape.parameter(np.zeros((2, 2)), name="w")
        g = tape.constant(np.ones((3, 2, 2)))
        updated = tape.weight_update(w, g, lr=0.5)
        tape.mark_output(tape.sum(updated))

        np.testing.assert_allclose(tape.value(updated), -0.5 * np.ones((3, 2, 2)))
        np.testing.assert_allclose(tape.backward()["w"], 3.0 * np.ones((2, 2)))

    def test_heaviside_surrogate(self):
        """Hard spikes use the triangular surrogate; smooth spikes pass the FD check."""
        u = np.array([-2.0, -0.5, 0.0, 0.25, 0.9, 3.0])
        tape = Tape(dtype=np.float64)
        p = tape.parameter(u, name="u")
        spikes = tape.heaviside(p, v_th=1.0, dampening=0.3)
        tape.mark_output(tape.sum(spikes))
        np.testing.assert_array_equal(tape.value(spikes), [0, 0, 1, 1, 1, 1])
        expected = 0.3 * np.maximum(0.0, 1.0 - np.abs(u))
        np.testing.assert_allclose(tape.backward()["u"], expected)

        smooth = Tape(dtype=np.float64, smooth_spikes=True)
        q = smooth.parameter(u, name="u")
        smooth.mark_output(smooth.sum(smooth.heaviside(q, v_th=1.0, dampening=0.3)))
        self.assertLess(finite_diff_check(smooth, step=1e-5, floor=1e-6), 1e-4)

    def test_stop_gradient_blocks_flow(self):
        """Nothing flows back through a stop-gradient node."""
        tape = Tape(dtype=np.float64)
        w = tape.parameter(np.array([1.0, 2.0]), name="w")
        tape.mark_output(tape.sum(w * tape.stop_gradient(w)))
        np.testing.assert_allclose(tape.backward()["w"], [1.0, 2.0])

    def test_replay_with_new_parameters(self):
        """Forward replays pick up new parameter values."""
        tape = Tape(dtype=np.float64)
        w = tape.parameter(np.array([1.0, 2.0]), name="w")
        tape.mark_output(tape.sum(w * w))
        self.assertAlmostEqual(float(tape.outputs[0].data), 5.0)
        (loss,) = tape.forward(params={"w": np.array([3.0, 0.0])})
        self.assertAlmostEqual(float(loss), 9.0)


class TestTapeErrors(unittest.TestCase):
    """Misuse of the tape is reported with the right error class."""

    def test_duplicate_name(self):
        """Two leaves cannot share a name."""
        tape = Tape()
        tape.parameter(np.zeros(2), name="w")
        with self.assertRaises(UsageError):
            tape.parameter(np.zeros(2), name="w")

    def test_backward_before_forward(self):
        """A lazy tape must be replayed before differentiation."""
        tape = Tape(eager=False)
        w = tape.parameter(np.ones(2), name="w")
        tape.sum(w)
        with self.assertRaises(UsageError):
            tape.backward()
        tape.forward()
        np.testing.assert_allclose(tape.backward()["w"], [1.0, 1.0])

    def test_shape_mismatch(self):
        """Incompatible operands raise a ShapeError naming the node."""
        tape = Tape()
        a = tape.input(np.zeros((2, 3)))
        with self.assertRaises(ShapeError) as ctx:
            tape.matmul(a, np.zeros((2, 3)))
        self.assertEqual(ctx.exception.op, "matmul")

    def test_non_finite_intermediate(self):
        """An infinite intermediate stops the pass."""
        tape = Tape()
        x = tape.input(np.array([np.inf, 1.0]))
        with self.assertRaises(NonFiniteError):
            tape.relu(x)

    def test_vector_loss_needs_seed(self):
        """A non-scalar loss needs an explicit seed gradient."""
        tape = Tape(dtype=np.float64)
        w = tape.parameter(np.array([1.0, 2.0]), name="w")
        tape.mark_output(w * 2.0)
        with self.assertRaises(UsageError):
            tape.backward()
        grads = tape.backward(loss_gradient=np.array([1.0, -1.0]))
        np.testing.assert_allclose(grads["w"], [2.0, -2.0])


class TestAdam(unittest.TestCase):
    """Adam updates and learning-rate schedule."""

    def test_schedule(self):
        """The learning rate decays in steps."""
        state = AdamState({"w": np.zeros(2)}, lr=0.1, decay=0.5, decay_every=10)
        self.assertAlmostEqual(state.effective_lr(9), 0.1)
        self.assertAlmostEqual(state.effective_lr(10), 0.05)
        self.assertAlmostEqual(state.effective_lr(25), 0.025)

    def test_first_step_moves_by_lr(self):
        """The bias-corrected first step has magnitude lr along sign(g)."""
        params = {"w": np.array([1.0, 1.0, 1.0])}
        state = AdamState(params, lr=0.01)
        updated = adam_step(state, params, {"w": np.array([3.0, -0.5, 0.0])})
        np.testing.assert_allclose(updated["w"], [0.99, 1.01, 1.0], atol=1e-6)
        self.assertEqual(state.step, 1)
        np.testing.assert_array_equal(params["w"], [1.0, 1.0, 1.0])

    def test_non_finite_gradient(self):
        """A NaN gradient is reported with the tensor name."""
        params = {"w": np.zeros(2)}
        state = AdamState(params)
        with self.assertRaises(NonFiniteError) as ctx:
            adam_step(state, params, {"w": np.array([np.nan, 0.0])})
        self.assertEqual(ctx.exception.tensor, "w")
        self.assertEqual(state.step, 0)

    def test_state_round_trip(self):
        """Moments and step survive an export and import."""
        params = {"w": np.zeros(3)}
        state = AdamState(params)
        adam_step(state, params, {"w": np.array([1.0, 2.0, 3.0])})
        restored = AdamState(params)
        restored.load_arrays(state.arrays())
        self.assertEqual(restored.step, 1)
        np.testing.assert_allclose(restored.m["w"], state.m["w"])


if __name__ == "__main__":
    unittest.main()
