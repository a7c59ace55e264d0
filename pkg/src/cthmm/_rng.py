"""Seeding helpers.

Every random draw in the package goes through a counter-based Philox
generator derived from a :class:`numpy.random.SeedSequence`, so independent
substreams can be spawned deterministically from one master seed.
"""

import numpy as np


def as_seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def make_rng(seed=None):
    """Return a Philox-backed generator; pass generators through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(as_seed_sequence(seed)))


def spawn(seed, n):
    """Derive ``n`` independent child seed sequences from ``seed``."""
    return as_seed_sequence(seed).spawn(n)


def labeled(seed, *labels):
    """Child seed sequence addressed by integer labels (e.g. repeat, iteration)."""
    ss = as_seed_sequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in labels))
