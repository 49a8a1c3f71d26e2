"""Counter-based random streams.

Every replicate draws from its own Philox4x64-10 generator whose 128-bit key
packs ``(lane, index, seed)``::

    key = seed | (index << 64) | (lane << 96)

with the counter starting at zero. Any Philox4x64-10 implementation given the
same key reproduces a stream bit-exactly, and no stream depends on how many
processes run the work.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, Field

__all__ = ["StreamFactory", "philox_key", "stream"]

_SEED_LIMIT = 1 << 64
_INDEX_LIMIT = 1 << 32


def philox_key(seed: int, index: int, lane: int = 0) -> int:
    """Pack a master seed, replicate index and lane into a Philox key.

    Raises:
        ValueError: If a component does not fit its bit field.
    """
    if not 0 <= seed < _SEED_LIMIT:
        raise ValueError(f"Cannot use seed {seed!r}: must fit in 64 bits.")
    if not 0 <= index < _INDEX_LIMIT:
        raise ValueError(f"Cannot use stream index {index!r}: must fit in 32 bits.")
    if not 0 <= lane < _INDEX_LIMIT:
        raise ValueError(f"Cannot use stream lane {lane!r}: must fit in 32 bits.")
    return seed | (index << 64) | (lane << 96)


def stream(seed: int, index: int, lane: int = 0) -> np.random.Generator:
    """Return the generator for replicate ``index`` of ``lane``."""
    return np.random.Generator(np.random.Philox(key=philox_key(seed, index, lane)))


class StreamFactory(BaseModel):
    """Hands out per-replicate generators for one lane of an experiment."""

    seed: int = Field(ge=0, lt=_SEED_LIMIT)
    lane: int = Field(default=0, ge=0, lt=_INDEX_LIMIT)

    model_config = {"frozen": True}

    def generator(self, index: int) -> np.random.Generator:
        """Return the generator of replicate ``index``."""
        return stream(self.seed, index, self.lane)

    def child(self, lane: int) -> StreamFactory:
        """Return a factory for another lane under the same seed."""
        return StreamFactory(seed=self.seed, lane=lane)
