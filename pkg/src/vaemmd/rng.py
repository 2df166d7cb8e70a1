"""Deterministic randomness: one counter-based generator family (Philox).

Every stochastic component takes an integer seed and derives independent
streams through `spawn`, so runs are bit-reproducible and per-item seeds
(case, epoch, step) never collide.
"""

from __future__ import annotations

import numpy as np


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def spawn(seed: int, *keys: int) -> int:
    """Derive a child seed from a root seed and a tuple of integer keys."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])
