"""Deterministic random-stream derivation.

Every randomized routine in this package takes an explicit
``numpy.random.Generator``. Streams for independent work units are
derived from a master seed plus a tuple of string/int keys, hashed
through SHA-256 so the derivation is stable across platforms and
process boundaries.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["make_rng", "derive_rng", "derive_seed_words"]


def derive_seed_words(master_seed, *keys):
    """Hash (master_seed, *keys) into eight uint32 words for SeedSequence."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode("utf-8"))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def make_rng(seed=0):
    """Generator seeded directly; use for single-stream contexts."""
    return np.random.default_rng(seed)


def derive_rng(master_seed, *keys):
    """Independent generator for the work unit identified by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed_words(master_seed, *keys)))
