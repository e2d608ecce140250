"""Order-preserving per-document map, capped by QUANTERR_THREADS (default 1)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("QUANTERR_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(max_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
