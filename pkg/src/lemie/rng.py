"""Counter-based random streams, one per (worker, purpose) pair."""

import zlib
from typing import Optional, Union

import numpy as np

SeedLike = Union[int, np.random.Generator, None]

# Worker id used for streams owned by the master node
MASTER = 10_000


def substream(seed: int, worker: int, purpose: str) -> np.random.Generator:
    """Return the generator for ``(worker, purpose)`` under ``seed``.

    Streams are keyed, not sequenced, so the draws a worker sees do not
    depend on how many other streams were created or in what order.
    """
    key = (int(worker), zlib.crc32(purpose.encode("utf-8")))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed: SeedLike, purpose: str = "default") -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(0 if seed is None else seed, MASTER, purpose)


def seed_trace(seed: SeedLike, worker: Optional[int], purpose: str) -> str:
    """Human-readable record of where a draw set's randomness came from."""
    if isinstance(seed, np.random.Generator):
        return f"generator:{purpose}"
    who = "master" if worker is None else f"worker{worker}"
    return f"seed={seed}/{who}/{purpose}"
