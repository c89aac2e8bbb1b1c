"""
Weight-magnitude histograms across checkpoints for l2l-pcm.
"""

import fnmatch
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from l2l_pcm.errors import UsageError
from l2l_pcm.utils.persistence import load_checkpoint, write_csv

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

HISTOGRAM_HEADER = ("checkpoint", "bin", "count", "fraction", "cumulative_fraction")


class HistogramRow(NamedTuple):
    checkpoint: str
    bin: int
    count: int
    fraction: float
    cumulative_fraction: float


def weight_histograms(
    snapshots: Sequence[Tuple[str, np.ndarray]], bins: int = 5
) -> List[HistogramRow]:
    """
    Bin normalized |w| of each snapshot into equal-width bins on [0, 1].

    The normalizer is the max-abs of the first snapshot and stays fixed, so
    weights that grow later pile up in the last bin. Bin k (1-based) covers
    [(k-1)/bins, k/bins); the last bin also holds 1.

    Args:
        snapshots: (label, weights) pairs in checkpoint order
        bins: Number of bins

    Returns:
        rows: bins rows per snapshot
    """
    if not snapshots:
        return []
    first = np.asarray(snapshots[0][1])
    peak = float(np.max(np.abs(first))) if first.size else 0.0
    norm = peak if peak > 0 else 1.0

    rows: List[HistogramRow] = []
    for label, weights in snapshots:
        weights = np.asarray(weights)
        if weights.shape != first.shape:
            raise UsageError(
                f"checkpoint {label} has shape {weights.shape}, "
                f"expected {first.shape}"
            )
        scaled = np.clip(np.abs(weights.astype(np.float64)).ravel() / norm, 0.0, 1.0)
        index = np.minimum((scaled * bins).astype(np.int64), bins - 1)
        counts = np.bincount(index, minlength=bins)
        total = max(int(counts.sum()), 1)
        cumulative = np.cumsum(counts) / total
        for k in range(bins):
            rows.append(
                HistogramRow(
                    label,
                    k + 1,
                    int(counts[k]),
                    counts[k] / total,
                    float(cumulative[k]),
                )
            )
    return rows


def select_weights(tensors: dict, selector: Optional[str]) -> np.ndarray:
    """Flatten and concatenate, in name order, every tensor matching the glob."""
    names = sorted(
        n for n in tensors if selector is None or fnmatch.fnmatch(n, selector)
    )
    if not names:
        raise UsageError(f"no tensor matches {selector!r}")
    return np.concatenate([np.asarray(tensors[n]).ravel() for n in names])


def emit_weight_histograms(
    checkpoints: Sequence[Union[str, Path]],
    selector: Optional[str] = None,
    bins: int = 5,
    out: Optional[Union[str, Path]] = None,
) -> List[HistogramRow]:
    """
    Histogram rows for a checkpoint sequence, optionally written as CSV.

    Args:
        checkpoints: Checkpoint files in order
        selector: Glob over tensor names (e.g. ``dense.*`` or ``trainee.w_*``)
        bins: Number of bins
        out: CSV destination

    Returns:
        rows: (checkpoint, bin, count, fraction, cumulative_fraction)
    """
    snapshots = [
        (Path(path).stem, select_weights(load_checkpoint(path), selector))
        for path in checkpoints
    ]
    rows = weight_histograms(snapshots, bins)
    if out is not None:
        write_csv(out, HISTOGRAM_HEADER, rows)
        logger.info("Wrote %d histogram rows to %s", len(rows), out)
    return rows
