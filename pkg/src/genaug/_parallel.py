from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "GENAUG_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get(ENV_THREADS, "").strip()
        threads = int(env) if env else 1
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``list(map(fn, items))`` run on up to ``threads`` workers, order preserved."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
