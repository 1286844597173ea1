"""Keyed RNG streams: every stochastic draw is derived from a tuple of
non-negative integers (experiment seed, step, batch, draw, ...)."""

import zlib

import numpy as np


def key_of(label):
    """Stable 32-bit integer for a string label."""
    return zlib.crc32(str(label).encode())


def rng_for(*keys):
    parts = [k if isinstance(k, (int, np.integer)) else key_of(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))
