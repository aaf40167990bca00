"""Order-preserving map over a process or thread pool."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1, threads: bool = False) -> list[R]:
    """``[fn(x) for x in items]`` with up to ``workers`` concurrent calls.

    Results come back in input order, so the output never depends on the
    worker count. ``fn`` must be picklable unless ``threads`` is set.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    pool = ThreadPoolExecutor if threads else ProcessPoolExecutor
    with pool(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
