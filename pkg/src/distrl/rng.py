"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by ``SeedSequence(seed, spawn_key=keys)``.  The spawn key hashes the
stream coordinates (state-action pair, replicate index, ...) into the key, so
a replicate's stream depends only on ``(seed, keys)`` and never on how work is
scheduled across workers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["derive_seed", "make_rng"]


def make_rng(seed: "int | np.random.Generator", *keys: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("stream keys need an integer seed")
        return seed
    ss = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for the stream ``(seed, keys)``, for APIs that take plain ints."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
