"""Order-stable block execution over a process pool."""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import Future, ProcessPoolExecutor
from typing import TypeVar

from pydantic import BaseModel, Field

__all__ = ["Block", "make_blocks", "map_blocks"]

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Block(BaseModel):
    """A contiguous run of replicate indices ``[start, stop)``."""

    index: int = Field(ge=0)
    start: int = Field(ge=0)
    stop: int = Field(ge=0)

    model_config = {"frozen": True}

    def __len__(self) -> int:
        return self.stop - self.start


def make_blocks(total: int, block_size: int) -> list[Block]:
    """Split ``total`` replicates into blocks of ``block_size``."""
    if block_size < 1:
        raise ValueError(f"Cannot split into blocks of size {block_size!r}.")
    return [
        Block(index=i, start=start, stop=min(start + block_size, total))
        for i, start in enumerate(range(0, total, block_size))
    ]


def map_blocks(
    fn: Callable[[T], R], items: Iterable[T], workers: int = 1
) -> Iterator[R]:
    """Apply ``fn`` to every item and yield results in input order.

    With ``workers > 1`` the calls run on a process pool with at most
    ``2 * workers`` items in flight. Closing the iterator early cancels the
    items not yet started, so callers can stop after the block that satisfies
    them.

    Args:
        fn: A picklable callable (module-level function or ``functools.partial``).
        items: Work items, consumed lazily.
        workers: Number of worker processes.

    Yields:
        ``fn(item)`` for each item, in the order the items were given.
    """
    if workers <= 1:
        for item in items:
            yield fn(item)
        return

    pool = ProcessPoolExecutor(max_workers=workers)
    pending: deque[Future[R]] = deque()
    try:
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
    finally:
        logger.debug("Shutting down pool with %d pending blocks", len(pending))
        pool.shutdown(wait=True, cancel_futures=True)
