"""Thread-count policy and an order-preserving parallel map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, TypeVar

from threadpoolctl import threadpool_limits

from .errors import ConfigError

THREADS_ENV = "BEVFUSE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {n}")
    return n


@contextmanager
def single_threaded_blas():
    """Pin BLAS to one thread so reductions keep a fixed summation order."""
    with threadpool_limits(limits=1):
        yield


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """``[fn(x) for x in items]`` on up to ``threads`` workers; result order is input order."""
    items = list(items)
    n = thread_count() if threads is None else threads
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
