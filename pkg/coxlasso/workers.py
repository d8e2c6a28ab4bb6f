"""
Replication pool.

Monte-Carlo replications are independent work units. Each one gets its own
RNG stream (seed, stream..., r), and results are collected into a list
indexed by replication, so the reduction order never depends on which
thread finished first.
"""

import os
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

from shared.utils import make_rng, setup_logging


logger = setup_logging(__name__)

T = TypeVar("T")


def resolve_threads(requested: Optional[int] = None) -> int:
    """Thread count: explicit request, else COXLASSO_THREADS, else available cores."""
    if requested is None:
        env = os.environ.get("COXLASSO_THREADS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValueError(f"COXLASSO_THREADS must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    if requested < 1:
        raise ValueError(f"Thread count must be >= 1, got {requested}")
    return requested


class ReplicationPool:
    """
    Runs work units over a thread pool and returns results in index order.

    Args:
        threads: Worker count (None: see resolve_threads)
    """

    def __init__(self, threads: Optional[int] = None):
        self.threads = resolve_threads(threads)
        self._lock = threading.Lock()
        self.completed = 0

    def map(self, fn: Callable[[int], T], count: int) -> List[T]:
        """Evaluate fn(0..count-1); results[i] = fn(i)."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        self.completed = 0
        if self.threads == 1 or count <= 1:
            results = []
            for i in range(count):
                results.append(fn(i))
                self.completed += 1
            return results

        results: List[Optional[T]] = [None] * count
        with ThreadPoolExecutor(max_workers=self.threads) as ex:
            futures = {ex.submit(fn, i): i for i in range(count)}
            for fut in as_completed(futures):
                results[futures[fut]] = fut.result()
                with self._lock:
                    self.completed += 1
        return results

    def map_items(self, fn: Callable, items: Sequence) -> List:
        return self.map(lambda i: fn(items[i]), len(items))

    def replicate(self, fn: Callable[[int, np.random.Generator], T], replications: int,
                  seed: int, *stream: int) -> List[T]:
        """fn(r, rng) for r < replications, rng drawn from stream (seed, *stream, r)."""
        return self.map(lambda r: fn(r, make_rng(seed, *stream, r)), replications)
