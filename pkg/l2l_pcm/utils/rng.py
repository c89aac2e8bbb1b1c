"""
Seed fan-out and ordered worker pools for l2l-pcm.
"""

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "L2L_THREADS"


class SeedBank:
    """
    Named generators split from one master seed.

    A stream is keyed by (master, crc32(name), index...), so adding a stream
    or a worker never shifts the draws of another stream.
    """

    def __init__(self, master: int):
        """
        Initialize the SeedBank.

        Args:
            master: Master seed of the run
        """
        self.master = int(master)
        logger.info("SeedBank initialized with master seed: %d", self.master)

    def sequence(self, name: str, *index: int) -> np.random.SeedSequence:
        key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
        return np.random.SeedSequence(self.master, spawn_key=key)

    def generator(self, name: str, *index: int) -> np.random.Generator:
        """Generator of the named stream (optionally one of its numbered substreams)."""
        return np.random.default_rng(self.sequence(name, *index))


def worker_count(default: int = 1) -> int:
    """Worker cap from ``L2L_THREADS`` (at least 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        return max(int(raw), 1)
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        return default


def ordered_map(
    fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None
) -> List[R]:
    """Apply ``fn`` to every item, in parallel when allowed, keeping input order."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
