"""
Quantizers for l2l-pcm.
"""

import logging
from typing import Optional, Tuple

import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Fractional positions closer than this to a level count as on the level.
_LEVEL_SNAP = 1e-9


def _snap(scaled: np.ndarray) -> np.ndarray:
    nearest = np.round(scaled)
    return np.where(np.abs(scaled - nearest) <= _LEVEL_SNAP, nearest, scaled)


def stochastic_round(
    values: np.ndarray, levels: int, uniforms: np.ndarray
) -> np.ndarray:
    """
    Round values in [-1, 1] onto the grid k / levels, k in [-levels, levels].

    A value at fractional position p above the lower neighbour rounds up
    when its uniform draw is below p, so the result is unbiased.

    Args:
        values: Values already clamped to [-1, 1]
        levels: Non-zero levels per sign
        uniforms: Draws from U[0, 1), same shape as ``values``

    Returns:
        quantized: Values on the grid
    """
    scaled = _snap(np.asarray(values, dtype=np.float64) * levels)
    low = np.floor(scaled)
    up = uniforms < (scaled - low)
    return ((low + up) / levels).astype(np.asarray(values).dtype, copy=False)


def round_to_levels(values: np.ndarray, levels: int) -> np.ndarray:
    """Deterministic nearest-level rounding onto k / levels."""
    return np.round(np.asarray(values, dtype=np.float64) * levels) / levels


def quantize_symmetric(
    values: np.ndarray, bits: int, axis: int = -1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signed max-abs quantization used for the 8-bit crossbar interfaces.

    Args:
        values: Real-valued array
        bits: Bit width including sign
        axis: Axis along which one scale is shared (one vector per call)

    Returns:
        codes: Integer-valued float array in [-(2^(bits-1) - 1), 2^(bits-1) - 1]
        scale: Real value of one code step, broadcastable against ``codes``
    """
    top = 2 ** (bits - 1) - 1
    values = np.asarray(values, dtype=np.float64)
    peak = np.max(np.abs(values), axis=axis, keepdims=True)
    step = np.where(peak > 0, peak / top, 1.0)
    codes = np.clip(np.round(values / step), -top, top)
    return codes, step


class StochasticRounder:
    """
    Stochastic rounding with a clamp counter.

    Values outside [-1, 1] are clamped before rounding; every clamped
    element is counted in ``clamped`` and reported with a warning.
    """

    def __init__(self, levels: int = 15, rng: Optional[np.random.Generator] = None):
        """
        Initialize the StochasticRounder.

        Args:
            levels: Non-zero levels per sign (15 gives a 1/15 step)
            rng: Seeded generator for the rounding draws
        """
        self.levels = levels
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.clamped = 0

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        outside = np.abs(values) > 1.0
        n_out = int(np.count_nonzero(outside))
        if n_out:
            self.clamped += n_out
            logger.warning(
                "Clamped %d values to [-1, 1] before stochastic rounding", n_out
            )
            values = np.clip(values, -1.0, 1.0)
        return stochastic_round(values, self.levels, self.rng.random(values.shape))


def quantize_stochastic(
    values: np.ndarray, levels: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Stochastically round values onto ``levels`` uniformly spaced signed levels.

    Args:
        values: Values in [-1, 1]; anything outside is clamped with a warning
        levels: Non-zero levels per sign
        rng: Seeded generator

    Returns:
        quantized: Unbiased quantized values
    """
    return StochasticRounder(levels, rng)(values)
