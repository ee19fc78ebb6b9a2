"""Counter-based random number generation.

All stochastic behavior in the toolkit (scene synthesis, augmentation,
weight init, dropout masks, Gaussian encoding frequencies) flows through
Philox streams keyed by an explicit 64-bit seed plus string/int tags, so
results are reproducible across platforms and independent of call order.
"""

import hashlib
import struct

import numpy as np


def derive_key(seed, *tags):
    """Derive a 128-bit Philox key from a seed and an arbitrary tag path."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    lo, hi = struct.unpack("<QQ", h.digest())
    return np.array([lo, hi], dtype=np.uint64)


def make_rng(seed, *tags):
    """Independent generator for (seed, *tags); same arguments, same stream."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *tags)))
