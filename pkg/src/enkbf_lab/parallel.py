"""Ordered thread-pool map used for replicate-level parallelism.

Every replicate derives its random streams from its own index, so results
are identical for any worker count; the map only has to keep input order.
The compiled kernels release the GIL, which makes threads worthwhile.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigInvalid


def worker_count(threads: int | None = None) -> int:
    """Worker threads: explicit value, else ENKBF_LAB_THREADS (0 = auto)."""
    if threads is None:
        raw = os.environ.get("ENKBF_LAB_THREADS", "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigInvalid(f"ENKBF_LAB_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ConfigInvalid("thread count must be >= 0")
    return threads or (os.cpu_count() or 1)


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Ordered map; results do not depend on the number of workers."""
    items = list(items)
    workers = min(worker_count(threads), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
