"""
Tests for the robot arm model and motor-task signals of l2l-pcm.
"""

import unittest

import numpy as np

from l2l_pcm.config import SafetyLimits, TrajectoryConfig
from l2l_pcm.errors import GenerationError, SafetyLimitError, UsageError
from l2l_pcm.robot.kinematics import (
    DhParams,
    JointState,
    Trajectory,
    dh_chain_position,
    forward_kinematics,
    integrate_velocities,
    kinematics_jacobian,
)
from l2l_pcm.robot.trajectory import (
    PositionEncoder,
    WorkspaceBox,
    clock_signal,
    encoder_period,
    estimate_workspace,
    gen_target_trajectory,
    hann_window,
    trajectory_rmse,
    wiener_process,
)


class TestKinematics(unittest.TestCase):
    """Closed-form positions and their derivatives."""

    def setUp(self):
        """Set up the stock arm and random poses."""
        self.dh = DhParams()
        self.angles = np.random.default_rng(0).uniform(-0.9, 0.9, size=(20, 2))

    def test_closed_form_matches_chain(self):
        """The closed form agrees with chaining the four link transforms."""
        closed = forward_kinematics(self.dh, self.angles)
        for pose, position in zip(self.angles, closed):
            chained = dh_chain_position(self.dh, np.array([pose[0], pose[1], 0.0, 0.0]))
            np.testing.assert_allclose(position, chained, atol=1e-9)

    def test_zero_lengths(self):
        """With every length zero the tool sits at (0, 0, d1)."""
        dh = DhParams(a=(0.0, 0.0, 0.0, 0.0), d=(35.85, 0.0, 0.0, 0.0))
        tool = forward_kinematics(dh, JointState(0.3, -0.2))
        np.testing.assert_allclose(tool, [0.0, 0.0, 35.85], atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        """The analytic Jacobian matches central differences."""
        jac = kinematics_jacobian(self.dh, self.angles)
        self.assertEqual(jac.shape, (20, 3, 2))
        eps = 1e-6
        for joint in range(2):
            shift = np.zeros(2)
            shift[joint] = eps
            numeric = (
                forward_kinematics(self.dh, self.angles + shift)
                - forward_kinematics(self.dh, self.angles - shift)
            ) / (2 * eps)
            np.testing.assert_allclose(jac[..., joint], numeric, atol=1e-5)

    def test_lipschitz_bound(self):
        """Position changes stay within the Lipschitz bound of the arm."""
        positions = forward_kinematics(self.dh, self.angles)
        moved = np.linalg.norm(positions[1:] - positions[:-1], axis=1)
        turned = np.linalg.norm(self.angles[1:] - self.angles[:-1], axis=1)
        self.assertTrue(np.all(moved <= self.dh.lipschitz * turned + 1e-9))

    def test_custom_twists_refused(self):
        """The closed form only covers the stock twists."""
        dh = DhParams(alpha=(0.0, 0.0, 0.0, 0.0))
        with self.assertRaises(UsageError):
            forward_kinematics(dh, np.zeros(2))


class TestIntegration(unittest.TestCase):
    """Velocity commands to angles and safeguards."""

    def test_integration(self):
        """Angles accumulate velocity times dt from the home pose."""
        velocities = np.tile([[1.0, -0.5]], (4, 1))
        trajectory = integrate_velocities(velocities, dt=0.001)
        np.testing.assert_allclose(trajectory.angles[-1], [0.004, -0.002])
        self.assertEqual(len(trajectory), 4)
        self.assertEqual(trajectory.positions.shape, (4, 3))

    def test_velocity_limit(self):
        """A command above the velocity clamp names its step and joint."""
        velocities = np.zeros((10, 2))
        velocities[3, 0] = 2.0
        with self.assertRaises(SafetyLimitError) as ctx:
            integrate_velocities(velocities, limits=SafetyLimits())
        self.assertEqual((ctx.exception.step, ctx.exception.joint), (3, 0))
        self.assertIn("joint 1", str(ctx.exception))

    def test_angle_limit(self):
        """Drifting past the angle limit is caught at the first offending step."""
        velocities = np.tile([[0.0, 1.3]], (1000, 1))
        with self.assertRaises(SafetyLimitError) as ctx:
            integrate_velocities(velocities, limits=SafetyLimits())
        self.assertEqual((ctx.exception.step, ctx.exception.joint), (692, 1))

    def test_unchecked_without_limits(self):
        """Without limits the same command integrates normally."""
        velocities = np.tile([[0.0, 1.3]], (1000, 1))
        angles = integrate_velocities(velocities).angles
        self.assertAlmostEqual(float(angles[-1, 1]), 1.3, places=9)


class TestTargets(unittest.TestCase):
    """Random target generation and the workspace box."""

    def test_hann_window(self):
        """The window is symmetric, starts at zero and sums to one."""
        window = hann_window(120)
        self.assertAlmostEqual(float(window.sum()), 1.0)
        self.assertEqual(float(window[0]), 0.0)
        np.testing.assert_allclose(window, window[::-1])

    def test_wiener_increment_variance(self):
        """Raw increments over 10^4 samples have variance within 10% of u."""
        u = TrajectoryConfig().wiener_variance
        walk = wiener_process(np.random.default_rng(17), 5001, u)
        increments = np.diff(walk, axis=0)
        self.assertEqual(increments.size, 10000)
        np.testing.assert_array_equal(walk[0], 0.0)
        self.assertLess(abs(float(np.var(increments)) - u), 0.1 * u)

    def test_targets_respect_safeguards(self):
        """Every generated target stays inside the limits."""
        rng = np.random.default_rng(3)
        limits = SafetyLimits()
        for _ in range(5):
            target = gen_target_trajectory(rng, TrajectoryConfig(), limits)
            self.assertEqual(len(target), 250)
            self.assertLessEqual(
                float(np.abs(target.velocities).max()), limits.velocity_limit
            )
            self.assertLessEqual(float(np.abs(target.angles).max()), limits.angle_limit)

    def test_targets_are_deterministic(self):
        """The same seed gives the same target."""
        a = gen_target_trajectory(np.random.default_rng(9))
        b = gen_target_trajectory(np.random.default_rng(9))
        np.testing.assert_array_equal(a.velocities, b.velocities)

    def test_generation_gives_up(self):
        """An impossible angle limit exhausts the resample budget."""
        limits = SafetyLimits(angle_limit=1e-9, max_resamples=3)
        with self.assertRaises(GenerationError):
            gen_target_trajectory(np.random.default_rng(0), TrajectoryConfig(), limits)

    def test_workspace_box_contains_targets(self):
        """Sampled targets fall inside the estimated box."""
        box = estimate_workspace(np.random.default_rng(1), samples=10)
        target = gen_target_trajectory(np.random.default_rng(1))
        self.assertTrue(np.all(target.positions >= np.asarray(box.low)))
        self.assertTrue(np.all(target.positions <= np.asarray(box.high)))


class TestEncoders(unittest.TestCase):
    """Position and clock spike trains."""

    def setUp(self):
        """Set up a unit-width 16-region box."""
        box = WorkspaceBox(low=(0.0, 0.0, 0.0), high=(16.0, 16.0, 16.0))
        self.encoder = PositionEncoder(box, 16, 10)

    def test_regions_and_boundaries(self):
        """Boundaries belong to the lower region; outside points are clamped."""
        points = np.array([[0.5, 1.0, 16.0], [-1.0, 20.0, 8.0]])
        index = self.encoder.region_index(points)
        np.testing.assert_array_equal(index, [[0, 0, 15], [0, 15, 7]])
        self.assertEqual(self.encoder.clamped, 2)

    def test_one_neuron_per_axis(self):
        """Exactly three neurons are active per step and decode back to the regions."""
        positions = np.random.default_rng(0).uniform(0.1, 15.9, size=(30, 3))
        active = self.encoder.active(positions)
        self.assertEqual(active.shape, (30, 48))
        np.testing.assert_array_equal(active.sum(axis=1), 3)
        np.testing.assert_array_equal(
            self.encoder.decode(active), self.encoder.region_index(positions)
        )
        spikes = self.encoder.encode(positions)
        self.assertEqual(float(spikes[0].sum()), 3.0)
        self.assertEqual(float(spikes[1:10].sum()), 0.0)
        with self.assertRaises(UsageError):
            self.encoder.decode(np.zeros((2, 48)))

    def test_encoder_period(self):
        """100 Hz at 1 ms steps is one spike every 10 steps."""
        self.assertEqual(encoder_period(100.0, 0.001), 10)

    def test_clock(self):
        """Each clock neuron fires five times inside its own 50-step window."""
        clock = clock_signal(250, 5, 10)
        self.assertEqual(clock.shape, (250, 5))
        np.testing.assert_array_equal(clock.sum(axis=0), [5, 5, 5, 5, 5])
        for i in range(5):
            times = np.flatnonzero(clock[:, i])
            self.assertTrue(np.all((times >= 50 * i) & (times < 50 * (i + 1))))


class TestRmse(unittest.TestCase):
    """Tracking error metrics."""

    def test_constant_offset(self):
        """A constant velocity offset shows up as the joint RMSE."""
        target = integrate_velocities(np.zeros((50, 2)))
        produced = integrate_velocities(np.tile([[0.1, 0.0]], (50, 1)))
        report = trajectory_rmse(produced, target)
        np.testing.assert_allclose(report.joint_rmse, [0.1, 0.0], atol=1e-12)
        self.assertGreater(report.euclidean_rmse, 0.0)
        self.assertEqual(
            set(report.as_row()), {"rmse_joint1", "rmse_joint2", "euclidean_cm"}
        )

    def test_length_mismatch(self):
        """Trajectories of different length cannot be compared."""
        a = Trajectory(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 3)))
        b = Trajectory(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 3)))
        with self.assertRaises(UsageError):
            trajectory_rmse(a, b)


if __name__ == "__main__":
    unittest.main()
