"""Deterministic random-number plumbing.

All randomness in the package flows from one root seed.  Independent
streams (particles, candidate views, episodes) are derived with
``numpy.random.SeedSequence`` spawn keys, so results are bit-identical
regardless of execution order or thread count.
"""

from __future__ import annotations

import numpy as np


def as_generator(seed) -> np.random.Generator:
    """Return a Generator for an int seed, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    if seed is None:
        raise ValueError("an explicit seed is required for sampling")
    return np.random.default_rng(int(seed))


def substream(root_seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream of ``root_seed`` addressed by ``key``.

    Equal (root_seed, key) pairs always yield identical streams;
    different keys yield statistically independent streams.
    """
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
