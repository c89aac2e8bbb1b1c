"""
Crossbar property suite behind the ``crossbar-check`` command.
"""

import itertools
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from l2l_pcm.config import AnalogConfig
from l2l_pcm.crossbar.core import PHASES, CrossbarCore, Region, mvm_error_bound
from l2l_pcm.crossbar.quantize import quantize_stochastic

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class CrossbarCheckReport(BaseModel):
    """Numbers measured by ``run_crossbar_checks``."""

    exact_max_error: float = Field(
        ..., description="Noise-off, bypassed mvm vs exact matmul"
    )
    bound_trials: int = Field(
        ..., description="Random problems checked against the bound"
    )
    bound_violations: int = Field(
        ..., description="Problems whose error exceeded the bound"
    )
    phase_max_difference: float = Field(
        ..., description="Largest output change over phase orders"
    )
    rounding_mean: float = Field(
        ..., description="Mean of repeated stochastic roundings"
    )
    rounding_target: float = Field(..., description="Value that was rounded")
    rounding_sigma: float = Field(..., description="Standard error of the mean")

    @property
    def bound_fraction(self) -> float:
        if self.bound_trials == 0:
            return 1.0
        return 1.0 - self.bound_violations / self.bound_trials

    @property
    def passed(self) -> bool:
        return (
            self.exact_max_error <= 1e-9
            and self.bound_fraction >= 0.99
            and abs(self.rounding_mean - self.rounding_target)
            <= 3 * self.rounding_sigma
        )


def run_crossbar_checks(
    config: Optional[AnalogConfig] = None,
    seed: int = 0,
    trials: int = 1000,
    size: int = 64,
    rounding_samples: int = 100000,
) -> CrossbarCheckReport:
    """
    Run the crossbar numerics checks on fresh cores.

    Args:
        config: Analog settings for the noisy checks
        seed: Seed of all draws
        trials: Random problems for the quantizer bound
        size: Rows and columns of each random problem
        rounding_samples: Draws for the rounding mean

    Returns:
        report: Measured errors and counts
    """
    config = config or AnalogConfig()
    rng = np.random.default_rng(seed)
    region = Region(0, 0, size, size)

    exact_cfg = config.model_copy(
        update={"prog_noise_sigma": 0.0, "bypass_quantizers": True}
    )
    exact = CrossbarCore(exact_cfg, rng=rng)
    w = rng.uniform(-1, 1, (size, size)).astype(np.float32).astype(np.float64)
    x = rng.uniform(-1, 1, (8, size))
    exact.program(w, region)
    exact_error = float(np.max(np.abs(exact.mvm(x, region) - x @ w)))

    phase_diff = 0.0
    quantized_cfg = config.model_copy(update={"bypass_quantizers": False})
    quantized = CrossbarCore(quantized_cfg, rng=rng)
    quantized.program(w, region)
    reference = quantized.mvm(x, region)
    for order in itertools.permutations(PHASES):
        moved = np.abs(quantized.mvm(x, region, order) - reference)
        phase_diff = max(phase_diff, float(np.max(moved)))

    violations = 0
    noisy = CrossbarCore(quantized_cfg, rng=rng)
    for _ in tqdm(range(trials), desc="Bound trials", disable=trials < 100):
        w = rng.uniform(-1, 1, (size, size))
        x = rng.uniform(-1, 1, size)
        noisy.program(w, region)
        error = np.abs(noisy.mvm(x, region) - x @ w)
        if np.any(error > mvm_error_bound(x, w, noisy.config)):
            violations += 1

    target = 0.3
    draws = quantize_stochastic(
        np.full(rounding_samples, target), config.weight_levels, rng
    )
    report = CrossbarCheckReport(
        exact_max_error=exact_error,
        bound_trials=trials,
        bound_violations=violations,
        phase_max_difference=phase_diff,
        rounding_mean=float(draws.mean()),
        rounding_target=target,
        rounding_sigma=float(draws.std() / np.sqrt(rounding_samples)),
    )
    logger.info(
        "Crossbar checks: exact error %.3g, bound held in %.2f%% of %d trials, "
        "rounding mean %.5f",
        report.exact_max_error,
        100 * report.bound_fraction,
        trials,
        report.rounding_mean,
    )
    return report
