"""
Finite-difference gradient oracle for l2l-pcm tapes.
"""

import logging
from typing import Optional, Sequence

import numpy as np

from l2l_pcm.errors import UsageError
from l2l_pcm.grad.tape import Tape

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _replayed_loss(tape: Tape, name: str, value: np.ndarray) -> float:
    return tape.forward(params={name: value}, freeze_detached=True)[0].item()


def finite_diff_check(
    tape: Tape,
    parameters: Optional[Sequence[str]] = None,
    step: float = 1e-3,
    floor: float = 1e-12,
    max_elements: Optional[int] = None,
) -> float:
    """
    Compare the tape's analytic gradients against central differences.

    Each parameter element is nudged by +-step and the loss replayed with
    stop-gradient nodes frozen, so both sides differentiate the same
    function. The tape is restored to its original values afterwards.

    Args:
        tape: A tape whose first output (or last node) is a scalar loss
        parameters: Parameter names to check (all by default)
        step: Central-difference half width
        floor: Denominator floor of the relative error
        max_elements: Check only the first elements of each tensor

    Returns:
        error: max |a - n| / (|a| + |n| + floor) over checked elements
    """
    outputs = tape.forward(freeze_detached=True)
    if outputs[0].size != 1:
        raise UsageError(
            f"finite_diff_check needs a scalar loss, got shape {outputs[0].shape}"
        )

    analytic = tape.backward()
    names = list(parameters) if parameters is not None else list(analytic)
    base = {name: tape.value(name).copy() for name in names}

    worst = 0.0
    try:
        for name in names:
            flat = base[name].ravel()
            count = flat.size if max_elements is None else min(flat.size, max_elements)
            for k in range(count):
                nudged = flat.copy()
                nudged[k] = flat[k] + step
                plus = _replayed_loss(tape, name, nudged.reshape(base[name].shape))
                nudged[k] = flat[k] - step
                minus = _replayed_loss(tape, name, nudged.reshape(base[name].shape))
                numeric = (plus - minus) / (2.0 * step)
                exact = float(analytic[name].ravel()[k])
                error = abs(exact - numeric) / (abs(exact) + abs(numeric) + floor)
                if error > worst:
                    logger.debug(
                        "%s[%d]: analytic %.6g numeric %.6g", name, k, exact, numeric
                    )
                    worst = error
    finally:
        tape.forward(params=base, freeze_detached=True)

    logger.info(
        "Finite-difference check over %d tensors: max relative error %.3g",
        len(names),
        worst,
    )
    return worst
