"""Seeding and small shared helpers.

All randomness in the toolkit flows from one integer seed through named
sub-streams, so that each component (corpus synthesis, augmentation,
weight init, shuffling) is reproducible on its own and independent of
the others.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, *tags) -> np.random.Generator:
    """Counter-based RNG for the sub-stream named by ``tags``.

    Uses Philox keyed on (seed, hash(tags)), so streams are independent
    of the order in which they are created and of each other.
    """
    h = hashlib.sha256()
    for tag in tags:
        h.update(str(tag).encode("utf-8"))
        h.update(b"\x1f")
    word = int.from_bytes(h.digest()[:8], "little")
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, word]))


def tensor_checksum(arrays) -> str:
    """SHA-256 over the raw bytes of an iterable of (name, array) pairs.

    Used to assert that frozen parameter sets are never mutated.
    """
    h = hashlib.sha256()
    for name, arr in arrays:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
