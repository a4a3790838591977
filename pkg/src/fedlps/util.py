"""Seeding and hashing helpers used across modules."""

from __future__ import annotations

import hashlib
import zlib

import numpy as np


def rng_for(seed: int, *tags: object) -> np.random.Generator:
    """Derive an independent generator from a master seed and a key path.

    The stream depends only on (seed, tags), never on call order, so any
    component can be recomputed in isolation (this is what makes checkpoint
    resume bit-compatible).
    """
    entropy = [seed & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def tree_digest(tree: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw little-endian bytes of a parameter tree."""
    h = hashlib.sha256()
    for name in sorted(tree):
        arr = np.ascontiguousarray(tree[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype("<f8", copy=False).tobytes())
    return h.hexdigest()
