"""
Utility functions for l2l-pcm.
"""

from l2l_pcm.utils.histograms import emit_weight_histograms, weight_histograms
from l2l_pcm.utils.persistence import (
    EPROP_MAGIC,
    MAML_MAGIC,
    MetricsSink,
    atomic_write_bytes,
    load_checkpoint,
    save_checkpoint,
    write_csv,
)
from l2l_pcm.utils.rng import SeedBank, ordered_map, worker_count

__all__ = [
    "emit_weight_histograms",
    "weight_histograms",
    "EPROP_MAGIC",
    "MAML_MAGIC",
    "MetricsSink",
    "atomic_write_bytes",
    "load_checkpoint",
    "save_checkpoint",
    "write_csv",
    "SeedBank",
    "ordered_map",
    "worker_count",
]
