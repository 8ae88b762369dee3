"""Deterministic fan-out over independent tasks (folds, repeats)."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "HODGEMIX_THREADS"


def resolve_jobs(n_jobs: int | None = None) -> int:
    """Worker count: explicit value, else ``$HODGEMIX_THREADS``, else 1."""
    if n_jobs is None:
        raw = os.environ.get(ENV_THREADS, "").strip()
        n_jobs = int(raw) if raw else 1
    return max(1, int(n_jobs))


def ordered_map(fn: Callable[[T], R], items: Iterable[T], n_jobs: int | None = None) -> list[R]:
    """``[fn(x) for x in items]``, optionally in worker processes.

    Results come back in input order whatever the completion order, so
    output never depends on the worker count.
    """
    items = list(items)
    jobs = min(resolve_jobs(n_jobs), len(items))
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
