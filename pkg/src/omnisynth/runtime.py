"""Process-level runtime knobs.

OMNISYNTH_THREADS caps intra-stage parallelism: 0 or 1 selects the
single-threaded deterministic mode (the default), larger values allow a
worker pool for read-only rendering work. Results are joined in index
order either way, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import os

__all__ = ["worker_count", "THREADS_ENV"]

THREADS_ENV = "OMNISYNTH_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return max(n, 1)
