"""
Target trajectories and spike encodings for the motor task in l2l-pcm.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import signal

from l2l_pcm.config import TRIAL_STEPS, SafetyLimits, TrajectoryConfig
from l2l_pcm.errors import GenerationError, SafetyLimitError, UsageError
from l2l_pcm.robot.kinematics import DhParams, Trajectory, integrate_velocities

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def hann_window(length: int, normalize: bool = True) -> np.ndarray:
    """
    Symmetric Hann window w(n) = 1/2 - 1/2 cos(2 pi n / (M - 1)).

    Args:
        length: Window length M
        normalize: Scale to unit sum

    Returns:
        window: Array of length M
    """
    window = signal.windows.hann(length, sym=True)
    if normalize:
        window = window / window.sum()
    return window


def wiener_process(
    rng: np.random.Generator, steps: int, variance: float, joints: int = 2
) -> np.ndarray:
    """Random walk from 0 with N(0, variance) increments, shape (steps, joints)."""
    increments = rng.normal(0.0, np.sqrt(variance), size=(steps - 1, joints))
    walk = np.cumsum(increments, axis=0)
    return np.concatenate([np.zeros((1, joints)), walk], axis=0)


def smooth(series: np.ndarray, window: np.ndarray) -> np.ndarray:
    """'same'-mode convolution of each column with ``window`` (zero-padded edges)."""
    return np.stack(
        [
            signal.convolve(series[:, j], window, mode="same")
            for j in range(series.shape[1])
        ],
        axis=1,
    )


def gen_target_trajectory(
    rng: np.random.Generator,
    config: Optional[TrajectoryConfig] = None,
    limits: Optional[SafetyLimits] = None,
    dh: Optional[DhParams] = None,
    steps: int = TRIAL_STEPS,
    dt: float = 0.001,
) -> Trajectory:
    """
    Draw a smooth random target motion that respects the safeguards.

    Velocities are a Hann-smoothed Wiener process per joint, clamped to the
    velocity limit; draws whose integrated angles leave the angle limit are
    rejected and redrawn.

    Args:
        rng: Seeded generator
        config: Generator settings
        limits: Safeguards
        dh: Arm description
        steps: Trajectory length
        dt: Step length in seconds

    Returns:
        trajectory: Target velocities, angles and positions

    Raises:
        GenerationError: if no safe draw is found within the resample budget
    """
    config = config or TrajectoryConfig()
    limits = limits or SafetyLimits()
    window = hann_window(config.hann_length)

    for attempt in range(limits.max_resamples):
        raw = wiener_process(rng, steps, config.wiener_variance)
        bound = limits.velocity_limit
        velocities = np.clip(smooth(raw, window), -bound, bound)
        try:
            return integrate_velocities(velocities, dt=dt, limits=limits, dh=dh)
        except SafetyLimitError as exc:
            logger.debug("Rejected target draw %d: %s", attempt, exc)

    raise GenerationError(f"no safe trajectory after {limits.max_resamples} draws")


class WorkspaceBox(BaseModel):
    """Axis-aligned bounds of reachable target positions (cm)."""

    model_config = ConfigDict(frozen=True)

    low: Tuple[float, float, float] = Field(..., description="Lower corner")
    high: Tuple[float, float, float] = Field(..., description="Upper corner")


def estimate_workspace(
    rng: np.random.Generator,
    config: Optional[TrajectoryConfig] = None,
    limits: Optional[SafetyLimits] = None,
    dh: Optional[DhParams] = None,
    samples: Optional[int] = None,
) -> WorkspaceBox:
    """
    Bound the positions visited by sampled safe targets, plus a margin.

    Args:
        rng: Seeded generator
        config: Generator settings (``workspace_samples``, ``workspace_margin``)
        limits: Safeguards
        dh: Arm description
        samples: Override for the number of sampled trajectories

    Returns:
        box: Per-axis min/max widened by the margin on each side
    """
    config = config or TrajectoryConfig()
    count = samples if samples is not None else config.workspace_samples
    low = np.full(3, np.inf)
    high = np.full(3, -np.inf)
    for _ in range(count):
        positions = gen_target_trajectory(rng, config, limits, dh).positions
        low = np.minimum(low, positions.min(axis=0))
        high = np.maximum(high, positions.max(axis=0))
    pad = np.maximum((high - low) * config.workspace_margin, 1e-6)
    box = WorkspaceBox(low=tuple(low - pad), high=tuple(high + pad))
    logger.info(
        "Workspace box from %d targets: low %s high %s", count, box.low, box.high
    )
    return box


def regular_spikes(active: np.ndarray, period: int) -> np.ndarray:
    """Fire every ``period`` steps (phase 0) wherever the (T, n) mask is set."""
    steps = np.arange(active.shape[0])[:, None]
    return active & (steps % period == 0)


def encoder_period(rate_hz: float, dt: float = 0.001) -> int:
    return max(int(round(1.0 / (rate_hz * dt))), 1)


class PositionEncoder:
    """
    Place-cell style encoding of 3-D positions.

    Each axis of the workspace box is cut into equal regions with one neuron
    each; the neuron of the region holding the current position fires
    regularly. Boundary positions belong to the lower region, and positions
    outside the box are clamped to the edge regions and counted.
    """

    def __init__(self, box: WorkspaceBox, regions: int = 16, period: int = 10):
        """
        Initialize the PositionEncoder.

        Args:
            box: Workspace bounds
            regions: Regions per axis
            period: Steps between spikes of an active neuron
        """
        self.box = box
        self.regions = regions
        self.period = period
        self.clamped = 0

    @property
    def neurons(self) -> int:
        return 3 * self.regions

    def region_index(self, positions: np.ndarray) -> np.ndarray:
        """Region of each coordinate, shape (T, 3), ints in [0, regions)."""
        low = np.asarray(self.box.low)
        high = np.asarray(self.box.high)
        positions = np.asarray(positions, dtype=np.float64)
        outside = (positions < low) | (positions > high)
        n_out = int(np.count_nonzero(outside))
        if n_out:
            self.clamped += n_out
            logger.warning("Clamped %d coordinates outside the workspace box", n_out)
        width = (high - low) / self.regions
        index = np.ceil((positions - low) / width).astype(np.int64) - 1
        return np.clip(index, 0, self.regions - 1)

    def active(self, positions: np.ndarray) -> np.ndarray:
        """Boolean (T, 3 * regions) mask of the neuron assigned to each step."""
        index = self.region_index(positions)
        mask = np.zeros((index.shape[0], self.neurons), dtype=bool)
        rows = np.arange(index.shape[0])
        for axis in range(3):
            mask[rows, axis * self.regions + index[:, axis]] = True
        return mask

    def encode(self, positions: np.ndarray) -> np.ndarray:
        """Spike trains (T, 3 * regions) as 0/1 floats."""
        return regular_spikes(self.active(positions), self.period).astype(np.float32)

    def decode(self, active: np.ndarray) -> np.ndarray:
        """Recover region indices (T, 3) from an activity mask."""
        active = np.asarray(active, dtype=bool)
        active = active.reshape(active.shape[0], 3, self.regions)
        if not np.all(active.sum(axis=2) == 1):
            raise UsageError("each axis needs exactly one active neuron per step")
        return np.argmax(active, axis=2)


def clock_signal(
    steps: int = TRIAL_STEPS, neurons: int = 5, period: int = 10
) -> np.ndarray:
    """
    Sequential clock: neuron i is active on [i * w, (i + 1) * w).

    The slot width is w = steps // neurons.

    Returns:
        spikes: (steps, neurons) 0/1 floats, identical for every trial
    """
    window = steps // neurons
    owner = np.minimum(np.arange(steps) // window, neurons - 1)
    active = owner[:, None] == np.arange(neurons)[None, :]
    steps_in_window = (np.arange(steps) - owner * window)[:, None]
    return (active & (steps_in_window % period == 0)).astype(np.float32)


@dataclass
class RmseReport:
    """Tracking error of one produced trajectory against its target."""

    joint_rmse: np.ndarray
    euclidean_rmse: float

    def as_row(self) -> dict:
        return {
            "rmse_joint1": float(self.joint_rmse[0]),
            "rmse_joint2": float(self.joint_rmse[1]),
            "euclidean_cm": float(self.euclidean_rmse),
        }


def trajectory_rmse(produced: Trajectory, target: Trajectory) -> RmseReport:
    """
    Root-mean-square velocity error per joint and Euclidean position error.

    Args:
        produced: Commanded trajectory
        target: Target trajectory of the same length

    Returns:
        report: rad/s per joint and cm
    """
    if len(produced) != len(target):
        raise UsageError(f"length mismatch: {len(produced)} vs {len(target)}")
    joint = np.sqrt(np.mean((produced.velocities - target.velocities) ** 2, axis=0))
    distance = np.sum((produced.positions - target.positions) ** 2, axis=1)
    euclidean = float(np.sqrt(np.mean(distance)))
    return RmseReport(joint_rmse=joint, euclidean_rmse=euclidean)
