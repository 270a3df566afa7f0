"""Counter-based random streams for scheduling-independent reproducibility.

Every consumer of randomness draws from its own named substream, keyed by
the run seed plus a (purpose, index, sweep) path.  Streams are backed by
the Philox counter-based bit generator, so a given (seed, path) always
yields the same draws no matter how many other streams were consumed in
between or on which thread.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream path parts must be int or str, got {type(part)}")


def substream(seed: int, *path) -> Generator:
    """Independent generator for the given seed and stream path."""
    entropy = (int(seed),) + tuple(_encode(p) for p in path)
    return Generator(Philox(SeedSequence(entropy)))
