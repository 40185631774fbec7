"""Deterministic thread-pool helpers.

Results always come back in input order, so any reduction over them is
independent of scheduling and the artifacts match across thread counts.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count(requested=None) -> int:
    """Effective worker count: explicit argument, else GGSFM_THREADS, else 1."""
    if requested is not None:
        n = int(requested)
        if n < 1:
            raise ValueError("thread count must be at least 1")
        return n
    env = os.environ.get("GGSFM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"GGSFM_THREADS={env!r} is not an integer")
        if n < 1:
            raise ValueError("GGSFM_THREADS must be at least 1")
        return n
    return 1


def map_ordered(fn, items, threads=None) -> list:
    """map() preserving input order, optionally across threads."""
    items = list(items)
    n = thread_count(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
