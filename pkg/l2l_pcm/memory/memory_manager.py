"""
Memory guard for unrolled meta-training in l2l-pcm.
"""

import gc
import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional

import psutil

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MB = 1024 * 1024


class MemoryManager:
    """
    Tracks tape footprints and resident memory across outer iterations.

    An unrolled tape keeps every intermediate of the inner loop (or of a
    whole motor trial) alive until backward. The largest tape seen so far is
    the quantity that decides whether a meta-batch fits, so it is recorded
    next to the process RSS.
    """

    def __init__(
        self, tape_budget_mb: Optional[float] = None, rss_limit_percent: float = 80.0
    ):
        """
        Initialize the MemoryManager.

        Args:
            tape_budget_mb: Tape size that triggers a one-time warning (None: off)
            rss_limit_percent: System memory use above which an iteration ends
                with a collection
        """
        self.tape_budget_mb = tape_budget_mb
        self.rss_limit_percent = rss_limit_percent
        self.peak_tape_bytes = 0
        self.iterations = 0
        self.collections = 0
        self._process = psutil.Process()
        self._start_rss = self._process.memory_info().rss
        self._over_budget = False

        logger.info(
            "MemoryManager initialized with tape budget: %s MB, RSS limit: %.1f%%",
            tape_budget_mb,
            rss_limit_percent,
        )

    def get_memory_usage(self) -> Dict[str, Any]:
        """Process RSS and its growth, system load and the peak tape size."""
        rss = self._process.memory_info().rss
        return {
            "rss_bytes": rss,
            "rss_growth_bytes": rss - self._start_rss,
            "system_used_percent": psutil.virtual_memory().percent,
            "peak_tape_bytes": self.peak_tape_bytes,
            "iterations": self.iterations,
            "collections": self.collections,
        }

    def log_memory_usage(self) -> None:
        usage = self.get_memory_usage()
        logger.info(
            "Memory after %d iterations: RSS %.1f MB (%+.1f MB), system %.1f%%, "
            "peak tape %.1f MB, %d collections",
            usage["iterations"],
            usage["rss_bytes"] / MB,
            usage["rss_growth_bytes"] / MB,
            usage["system_used_percent"],
            usage["peak_tape_bytes"] / MB,
            usage["collections"],
        )

    def track_tape(self, tape: Any) -> int:
        """
        Record the footprint of a recorded tape.

        Args:
            tape: A tape (anything with ``nbytes()``) after its forward pass

        Returns:
            size: Bytes held by the tape
        """
        size = int(tape.nbytes())
        self.peak_tape_bytes = max(self.peak_tape_bytes, size)
        budget = self.tape_budget_mb
        if budget is not None and size > budget * MB and not self._over_budget:
            self._over_budget = True
            logger.warning(
                "Tape holds %.1f MB, above the %.1f MB budget; "
                "lower inner steps, filters or L2L_THREADS",
                size / MB,
                self.tape_budget_mb,
            )
        return size

    @contextmanager
    def optimize_memory(self) -> Iterator["MemoryManager"]:
        """
        Wrap one outer iteration.

        Tapes of the iteration become garbage when it ends. They are collected
        right away when system memory is above ``rss_limit_percent``.

        Example:
            ```
            with memory_manager.optimize_memory():
                params, loss = outer_step(...)
            ```
        """
        try:
            yield self
        finally:
            self.iterations += 1
            if psutil.virtual_memory().percent > self.rss_limit_percent:
                freed = gc.collect()
                self.collections += 1
                logger.debug(
                    "Iteration %d: collected %d objects", self.iterations, freed
                )
