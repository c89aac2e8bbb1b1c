"""
Tests for layer placement and dispatch in l2l-pcm.
"""

import unittest

import numpy as np

from l2l_pcm.config import AnalogConfig
from l2l_pcm.deploy import (
    Deployment,
    LayerSpec,
    PlacementPlan,
    cnn_layers,
    col2im,
    im2col,
    layer_matrix,
    plan_placement,
)
from l2l_pcm.deploy.im2col import resolve_padding
from l2l_pcm.errors import CapacityError, UsageError


def _direct_conv(x, w, stride, pads):
    top, bottom, left, right = pads
    padded = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    k = w.shape[0]
    out_h = (padded.shape[1] - k) // stride + 1
    out_w = (padded.shape[2] - k) // stride + 1
    out = np.zeros((x.shape[0], out_h, out_w, w.shape[3]))
    for r in range(out_h):
        for c in range(out_w):
            rows = slice(r * stride, r * stride + k)
            cols = slice(c * stride, c * stride + k)
            patch = padded[:, rows, cols, :]
            out[:, r, c, :] = np.einsum("bijc,ijcf->bf", patch, w)
    return out


class TestIm2col(unittest.TestCase):
    """Lowering of strided convolutions to matrix products."""

    def setUp(self):
        """Set up a seeded generator."""
        self.rng = np.random.default_rng(21)

    def test_same_padding_geometry(self):
        """Stride-2 same padding gives ceil(size / 2) outputs, extra pad below."""
        self.assertEqual(resolve_padding(28, 28, 3, 2, "same"), (0, 1, 0, 1))
        self.assertEqual(resolve_padding(14, 14, 3, 2, "same"), (0, 1, 0, 1))
        self.assertEqual(resolve_padding(7, 7, 3, 2, "same"), (1, 1, 1, 1))
        buf = im2col(np.zeros((28, 28)), kernel=3, stride=2)
        self.assertEqual((buf.out_height, buf.out_width), (14, 14))
        self.assertEqual(buf.patches.shape, (196, 9))

    def test_matches_direct_convolution(self):
        """Over 100 random shapes and paddings the lowering is a direct convolution."""
        for case in range(100):
            rng = np.random.default_rng(case)
            kernel = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 4))
            batch, channels, filters = (int(v) for v in rng.integers(1, 4, size=3))
            height, width = (int(v) for v in rng.integers(kernel, 11, size=2))
            padding = [
                "same",
                int(rng.integers(0, 3)),
                tuple(int(p) for p in rng.integers(0, 3, size=4)),
            ][case % 3]
            x = rng.normal(size=(batch, height, width, channels))
            w = rng.normal(size=(kernel, kernel, channels, filters))
            with self.subTest(case=case, kernel=kernel, stride=stride, padding=padding):
                buf = im2col(x, kernel=kernel, stride=stride, padding=padding)
                lowered = buf.patches @ w.reshape(-1, filters)
                lowered = lowered.reshape(batch, buf.out_height, buf.out_width, filters)
                direct = _direct_conv(x, w, stride, buf.padding)
                np.testing.assert_allclose(lowered, direct, atol=1e-12)

    def test_bias_column(self):
        """The bias column pairs with the bias row of the layer matrix."""
        x = self.rng.normal(size=(1, 5, 5, 2))
        w = self.rng.normal(size=(3, 3, 2, 3))
        b = self.rng.normal(size=3)
        buf = im2col(x, bias_column=True)
        self.assertTrue(np.all(buf.patches[:, -1] == 1.0))
        lowered = buf.patches @ layer_matrix(w, b)
        expected = _direct_conv(x, w, 2, buf.padding).reshape(-1, 3) + b
        np.testing.assert_allclose(lowered, expected, atol=1e-12)

    def test_col2im_is_the_adjoint(self):
        """<im2col(x), g> equals <x, col2im(g)>."""
        x = self.rng.normal(size=(2, 6, 6, 2))
        buf = im2col(x, kernel=3, stride=2)
        g = self.rng.normal(size=buf.patches.shape)
        self.assertAlmostEqual(
            float(np.sum(buf.patches * g)), float(np.sum(x * col2im(g, buf))), places=10
        )


class TestPlacement(unittest.TestCase):
    """Greedy placement of layer matrices on 256x256 cores."""

    def test_full_network_device_count(self):
        """The full four-block network uses 342720 devices, 1120 for the dense layer."""
        plan = plan_placement(cnn_layers(), cores=2)
        self.assertEqual(plan.device_count(), 342720)
        self.assertEqual(plan.device_count("dense"), 1120)
        self.assertEqual(plan.layer("conv2").rows, 505)

    def test_fragments_do_not_overlap(self):
        """No two fragments on the same core share a cell."""
        plan = plan_placement(cnn_layers(), cores=2)
        for core in range(plan.cores):
            regions = [e.region for e in plan.entries if e.core == core]
            for i, a in enumerate(regions):
                for b in regions[i + 1 :]:
                    self.assertFalse(a.overlaps(b))

    def test_capacity_error(self):
        """One core cannot hold the full network; the overflow is listed."""
        with self.assertRaises(CapacityError) as ctx:
            plan_placement(cnn_layers(), cores=1)
        self.assertTrue(ctx.exception.overflow)

    def test_jsonl_round_trip(self):
        """A plan reloads from its placement log."""
        plan = plan_placement(cnn_layers(filters=8), cores=1)
        restored = PlacementPlan.from_jsonl(plan.to_jsonl())
        self.assertEqual(restored.entries, plan.entries)
        self.assertEqual(restored.device_count(), plan.device_count())


class TestDeployment(unittest.TestCase):
    """Programming and fragmented dispatch."""

    def setUp(self):
        """Set up a plan with row- and column-split layers."""
        self.rng = np.random.default_rng(5)
        self.layers = [
            LayerSpec(name="tall", rows=300, cols=40, kind="dense", bias_row=True),
            LayerSpec(name="wide", rows=20, cols=300, kind="dense"),
        ]
        self.plan = plan_placement(self.layers, cores=2)
        self.config = AnalogConfig(prog_noise_sigma=0.0, bypass_quantizers=True)

    def test_fragmented_dispatch_matches_matmul(self):
        """Split layers give the whole-matrix products of the float32-stored weights."""
        self.assertEqual(len(self.plan.fragments("tall")), 2)
        self.assertEqual(len(self.plan.fragments("wide")), 2)
        deployment = Deployment(self.plan, self.config)
        tall = self.rng.normal(size=(300, 40))
        wide = self.rng.normal(size=(20, 300))
        deployment.program_layer("tall", tall)
        deployment.program_layer("wide", wide)
        stored = {}
        for name, matrix in (("tall", tall), ("wide", wide)):
            scale = float(np.max(np.abs(matrix)))
            rounded = (matrix / scale).astype(np.float32).astype(np.float64)
            stored[name] = rounded * scale
            np.testing.assert_array_equal(deployment.read_layer(name), stored[name])

        x = self.rng.normal(size=(3, 299))
        expected = np.concatenate([x, np.ones((3, 1))], axis=1) @ stored["tall"]
        np.testing.assert_allclose(
            deployment.dispatch_mvm("tall", x), expected, rtol=0, atol=1e-11
        )
        v = self.rng.normal(size=20)
        np.testing.assert_allclose(
            deployment.dispatch_mvm("wide", v), v @ stored["wide"], rtol=0, atol=1e-11
        )
        np.testing.assert_allclose(
            deployment.read_layer("wide"), wide, rtol=1e-6, atol=1e-6
        )

    def test_event_log(self):
        """Program, reprogram, calibrate and drift are all logged."""
        deployment = Deployment(self.plan, self.config, context={"task": 0})
        wide = self.rng.normal(size=(20, 300))
        deployment.program_layer("wide", wide)
        deployment.reprogram_region("wide", wide * 0.5)
        deployment.calibrate(["wide"])
        deployment.apply_drift(1.0)
        self.assertEqual(deployment.count_events("program"), 1)
        self.assertEqual(deployment.count_events("reprogram", "wide"), 1)
        self.assertEqual(deployment.count_events("calibrate"), 1)
        self.assertEqual(deployment.count_events("drift"), 2)
        self.assertEqual(deployment.events[0]["task"], 0)
        self.assertEqual(deployment.events[0]["devices"], 20 * 300 * 4)

    def test_reprogram_before_program(self):
        """Reprogramming a layer that was never programmed is a usage error."""
        deployment = Deployment(self.plan, self.config)
        with self.assertRaises(UsageError):
            deployment.reprogram_region("wide", np.zeros((20, 300)))
        with self.assertRaises(UsageError):
            deployment.dispatch_mvm("wide", np.zeros(20))

    def test_wrong_matrix_shape(self):
        """A matrix that does not match the plan is refused."""
        deployment = Deployment(self.plan, self.config)
        with self.assertRaises(UsageError):
            deployment.program_layer("wide", np.zeros((21, 300)))


if __name__ == "__main__":
    unittest.main()
