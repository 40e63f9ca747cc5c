"""Seed derivation and random generators.

Every random draw in the package comes from a :class:`numpy.random.Philox`
counter-based generator keyed by a 64-bit seed. Child seeds are derived with
:func:`derive_seed`, which hashes the parent seed and a sequence of keys with
BLAKE2b (8-byte digest):

    payload = u64le(parent) || for each key: tag || bytes(key)

where integer keys are encoded as ``b"i" + i64le(key)`` and string keys as
``b"s" + utf8(key) + b"\\x00"``. The digest is read back as an unsigned
little-endian 64-bit integer.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(seed) & MASK64))
    for key in keys:
        if isinstance(key, str):
            h.update(b"s" + key.encode("utf-8") + b"\x00")
        else:
            h.update(b"i" + struct.pack("<q", int(key)))
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Philox generator for ``derive_seed(seed, *keys)`` (or ``seed`` itself with no keys)."""
    s = derive_seed(seed, *keys) if keys else int(seed) & MASK64
    return np.random.Generator(np.random.Philox(key=s))
