"""Seedable random streams.

Every stream is a :class:`numpy.random.Generator` over the counter-based
Philox-4x64 bit generator, keyed through a :class:`numpy.random.SeedSequence`
built from ``(seed, *path)``. ``path`` is a tuple of non-negative integers
naming the sub-stream (grid cell, trial, branch, ...), so independent pieces of
a study draw from disjoint streams and the result does not depend on the order
in which they are evaluated.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream path entries must be non-negative")
    return part


def make_rng(seed, *path):
    """Return a Philox generator for ``seed`` and the sub-stream ``path``.

    String path entries are hashed with CRC-32 so streams can be named.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng):
    """Draw a 63-bit integer seed from ``rng`` for handing to a sub-computation."""
    return int(rng.integers(0, 2**63 - 1))
