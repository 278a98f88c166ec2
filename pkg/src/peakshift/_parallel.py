"""Deterministic worker-pool helper.

Batch drivers hand out one task per item; any randomness a task needs is
derived from (seed, item index) by the caller before dispatch.  Results come
back in submission order, so reductions see the same operand order at every
worker count and outputs are bit-identical regardless of scheduling.
"""

from __future__ import annotations

import multiprocessing
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Map ``fn`` over ``items``, optionally across processes, order-stable."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    jobs = min(jobs, len(items))
    chunksize = max(1, len(items) // (jobs * 4))
    with multiprocessing.get_context("fork").Pool(jobs) as pool:
        return pool.map(fn, items, chunksize=chunksize)
