"""Deterministic RNG stream derivation.

Parallel workers each derive their own stream from (seed, *tokens), so results
never depend on scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def token_int(token) -> int:
    """Stable 64-bit integer for a string-able token (platform independent)."""
    digest = hashlib.sha256(str(token).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tokens) -> np.random.Generator:
    """Generator seeded from a base seed plus arbitrary tokens (ids, epoch, batch)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [token_int(t) for t in tokens]
    return np.random.default_rng(entropy)


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
