"""Deterministic thread fan-out for per-patch work.

Work is always decomposed the same way regardless of the worker count, and
results are collected in submission order, so any thread count produces
bit-identical output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["resolve_threads", "parallel_map"]


def resolve_threads(threads: int | None) -> int:
    """Map a --threads value (None -> env JSR_THREADS, 0 -> auto) to a count."""
    if threads is None:
        env = os.environ.get("JSR_THREADS", "").strip()
        threads = int(env) if env else 1
    if threads < 0:
        raise ValueError(f"thread count must be >= 0, got {threads}")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def parallel_map(fn, items, threads: int = 1) -> list:
    """Apply fn to each item, optionally across threads; order is preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
