"""Thread-safe worker pool for deterministic data-parallel kernels."""

from __future__ import annotations

import logging
import os
import threading
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

from .exceptions import ValidationError

logger = logging.getLogger("vncseg")

THREADS_ENV_VAR = "VNCSEG_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_worker_count(requested: int | None = None) -> int:
    """Determine how many workers to use.

    Args:
        requested: Explicit worker count. If not provided, the
            ``VNCSEG_THREADS`` environment variable is consulted, then the CPU count.

    Returns:
        Worker count, at least 1.

    Raises:
        ValidationError: If the environment variable is not a positive integer.
    """
    if requested is not None:
        if requested < 1:
            raise ValidationError(f"Worker count must be >= 1, got {requested}")
        return requested

    env_value = os.environ.get(THREADS_ENV_VAR)
    if env_value:
        try:
            count = int(env_value)
        except ValueError as e:
            raise ValidationError(
                f"{THREADS_ENV_VAR} must be a positive integer, got {env_value!r}"
            ) from e
        if count < 1:
            raise ValidationError(f"{THREADS_ENV_VAR} must be >= 1, got {count}")
        return count

    return os.cpu_count() or 1


class WorkerPool:
    """Bounded pool that maps a function over items and keeps input order.

    Tasks never share output buffers, and results come back in input order,
    so callers that reduce over the returned list in index order get the same
    bits for any worker count.

    Example:
        >>> pool = WorkerPool(max_workers=4)
        >>> pool.map(lambda x: x * x, range(5))
        [0, 1, 4, 9, 16]
    """

    def __init__(self, max_workers: int | None = None) -> None:
        """Initialize the worker pool.

        Args:
            max_workers: Maximum number of threads. Defaults to
                ``VNCSEG_THREADS`` or the CPU count. 1 runs tasks inline.
        """
        self._max_workers = resolve_worker_count(max_workers)
        self._executor: ThreadPoolExecutor | None = None
        self._executor_lock = threading.Lock()

        # Statistics
        self._stats_lock = threading.Lock()
        self._total_tasks = 0
        self._total_batches = 0

    @property
    def max_workers(self) -> int:
        """Maximum number of concurrent workers."""
        return self._max_workers

    @property
    def stats(self) -> dict[str, int]:
        """Get pool statistics.

        Returns:
            Dictionary with total_tasks and total_batches.
        """
        with self._stats_lock:
            return {
                "total_tasks": self._total_tasks,
                "total_batches": self._total_batches,
            }

    def _get_executor(self) -> ThreadPoolExecutor:
        with self._executor_lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(
                    max_workers=self._max_workers, thread_name_prefix="vncseg"
                )
            return self._executor

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply ``fn`` to every item and return results in input order.

        Args:
            fn: Function of one item. Must only write to memory it owns.
            items: Items to process.

        Returns:
            List of results, ``results[i] == fn(items[i])``.
        """
        work: Sequence[T] = list(items)
        with self._stats_lock:
            self._total_tasks += len(work)
            self._total_batches += 1

        if self._max_workers == 1 or len(work) <= 1:
            return [fn(item) for item in work]
        return list(self._get_executor().map(fn, work))

    def close(self) -> None:
        """Shut down worker threads."""
        with self._executor_lock:
            if self._executor is not None:
                self._executor.shutdown(wait=True)
                self._executor = None

    def __enter__(self) -> WorkerPool:
        """Enter context manager."""
        return self

    def __exit__(self, *args: object) -> None:
        """Exit context manager and stop workers."""
        self.close()


# Global pool instance for convenience
_pool: WorkerPool | None = None
_pool_lock = threading.Lock()


def set_worker_count(max_workers: int | None) -> WorkerPool:
    """Replace the shared pool with one of the given size.

    Args:
        max_workers: Worker count, or None to re-read ``VNCSEG_THREADS``.

    Returns:
        The new shared pool.
    """
    global _pool
    with _pool_lock:
        if _pool is not None:
            _pool.close()
        _pool = WorkerPool(max_workers)
        logger.debug("Worker pool set to %d workers", _pool.max_workers)
        return _pool


def get_pool() -> WorkerPool:
    """Get or create the shared worker pool.

    Returns:
        Shared WorkerPool, sized from ``VNCSEG_THREADS`` on first use.
    """
    global _pool
    with _pool_lock:
        if _pool is None:
            _pool = WorkerPool()
        return _pool
