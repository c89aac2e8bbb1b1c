"""
PCM crossbar simulation components for l2l-pcm.
"""

from l2l_pcm.crossbar.checks import CrossbarCheckReport, run_crossbar_checks
from l2l_pcm.crossbar.core import (
    CORE_SIZE,
    PHASES,
    CrossbarCore,
    ProgrammingReport,
    Region,
    mvm_error_bound,
)
from l2l_pcm.crossbar.quantize import (
    StochasticRounder,
    quantize_stochastic,
    quantize_symmetric,
    round_to_levels,
    stochastic_round,
)

__all__ = [
    "CORE_SIZE",
    "PHASES",
    "CrossbarCore",
    "ProgrammingReport",
    "Region",
    "mvm_error_bound",
    "CrossbarCheckReport",
    "run_crossbar_checks",
    "StochasticRounder",
    "quantize_stochastic",
    "quantize_symmetric",
    "round_to_levels",
    "stochastic_round",
]
