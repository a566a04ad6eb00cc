"""Replicate-level concurrency.

Results never depend on the worker count: every replicate draws from its own
keyed streams and results are gathered in replicate order.
"""
import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "SMC_THREADS"


def thread_count(threads=None):
    """Worker count: explicit argument, else ``SMC_THREADS``, else the CPU count (max 8)."""
    if threads is None:
        raw = os.environ.get(ENV_THREADS, "").strip()
        if raw:
            try:
                threads = int(raw)
            except ValueError:
                raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from None
        else:
            threads = min(os.cpu_count() or 1, 8)
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


def map_replicates(fn, items, threads=None):
    """``[fn(x) for x in items]``, possibly evaluated concurrently."""
    items = list(items)
    threads = thread_count(threads)
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
