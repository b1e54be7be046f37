"""Deterministic worker pool: results always come back in input order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "CURVISLICE_THREADS"

_threads: Optional[int] = None


def set_threads(n: Optional[int]) -> None:
    """Set the default worker count (None falls back to the environment)."""
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be positive")
    _threads = n


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T],
                 threads: Optional[int] = None) -> List[R]:
    """Map ``fn`` over ``items``; the output order never depends on scheduling."""
    items = list(items)
    n = threads if threads is not None else get_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
