"""Seeded random streams.

Every stochastic routine in the package draws from numpy's Philox4x64-10
counter-based bit generator keyed by a ``SeedSequence``. Philox output is
specified bit-for-bit by its algorithm, so fixtures regenerate identically on
any platform with the same numpy stream semantics. Independent sub-streams
(bootstrap resamples, restarts) come from ``SeedSequence.spawn``.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn(seed, n: int) -> list:
    """``n`` independent generators derived from ``seed``; item ``k`` depends only on (seed, k)."""
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]
