"""Allocation accounting used to check the solver's memory contract."""
from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass


@dataclass
class AllocationReport:
    baseline_bytes: int = 0
    peak_bytes: int = 0

    @property
    def peak_increase(self) -> int:
        """Peak traced memory above the level at entry.

        This bounds the largest single allocation requested inside the
        block, including numpy temporaries.
        """
        return max(0, self.peak_bytes - self.baseline_bytes)


@contextmanager
def track_allocations():
    """Trace every Python and numpy allocation made inside the block."""
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    report = AllocationReport()
    report.baseline_bytes = tracemalloc.get_traced_memory()[0]
    tracemalloc.reset_peak()
    try:
        yield report
    finally:
        report.peak_bytes = tracemalloc.get_traced_memory()[1]
        if started:
            tracemalloc.stop()
