"""Deterministic seed derivation shared by every randomized component.

Per-item seeds are derived by hashing (master_seed, item id, operation name),
so construction order and parallelism never change the outcome.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Collapse arbitrary parts into a stable unsigned 64-bit seed."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng(*parts: object) -> np.random.Generator:
    """A PCG64 generator keyed by the derived seed of ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
