"""Reproducible random number streams.

Every stochastic component draws from a Philox (counter-based) generator
keyed by a root seed plus an integer path, e.g. ``stream(seed, replicate,
chain)``.  Streams with distinct keys are statistically independent, and a
given key always yields the same sequence, so replicate-level work can be
farmed out to any number of processes without changing results.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for stream ``key`` under the given root seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
