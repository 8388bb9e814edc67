"""Seeded, platform-portable random streams.

All randomness goes through numpy's PCG64 bit generator, whose output
sequence is fixed by the seed on every platform.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(seed: int, *path: int) -> int:
    """Derive an independent 63-bit seed from ``seed`` and an index path (e.g. trial number)."""
    ss = np.random.SeedSequence([int(seed), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
