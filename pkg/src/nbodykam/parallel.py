"""Deterministic thread-pool helpers.

Thread count comes from the NBODYKAM_THREADS environment variable when
set, else os.cpu_count().  parallel_map preserves input order, so
reductions over its output do not depend on scheduling and results are
identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

THREADS_ENV = "NBODYKAM_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(
                f"{THREADS_ENV} must be an integer, got {raw!r}"
            ) from exc
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def parallel_map(
    fn: Callable[[T], R], items: Sequence[T], threads: int | None = None
) -> list[R]:
    """Ordered map, threaded when it pays off.

    Output order matches the input order, so callers may fold over the
    result without caring how many workers ran.
    """
    if threads is None:
        threads = thread_count()
    seq = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(it) for it in seq]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seq))
