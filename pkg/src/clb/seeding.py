"""Deterministic seed derivation.

Every random consumer in the engine (model init, shuffles, crops, replay
draws, reservoir decisions) gets its own child seed derived from the master
seed plus a tag path. Streams therefore stay aligned across strategies and
sweep cells that share a master seed, which is what makes paired comparisons
meaningful.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(*parts: int | str) -> int:
    """Derive a stable 64-bit seed from a mixed path of ints and tag strings."""
    entropy: list[int] = []
    for part in parts:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    seq = np.random.SeedSequence(entropy)
    return int(seq.generate_state(1, np.uint64)[0])
