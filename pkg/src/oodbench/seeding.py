"""Deterministic seed derivation for nested experiment stages.

Seeds derive from tagged part lists hashed with blake2b, so every stage
(init, shuffle, pair refresh, trial) gets an independent stream that is
stable across platforms and process restarts.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import InvalidArgumentError


def hash_seed(*parts) -> int:
    """64-bit seed from a mixed tuple of ints, strings, and floats."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            part = int(part)
        if isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        elif isinstance(part, float):
            h.update(b"f")
            h.update(struct.pack("<d", part))
        else:
            raise InvalidArgumentError(
                f"seed parts must be int, str, or float, got {type(part).__name__}"
            )
    return int.from_bytes(h.digest(), "little")


def rng_from(*parts) -> np.random.Generator:
    return np.random.default_rng(hash_seed(*parts))
