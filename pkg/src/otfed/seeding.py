"""Deterministic seed derivation.

Every random decision in the package draws from a generator seeded through
`derive_seed`, so independent subsystems (partitioning, init, shuffling,
client sampling, rate draws) never share a stream and runs are reproducible
bit for bit from a single root seed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Fold an arbitrary tag tuple into a stable 64-bit seed."""
    text = "/".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Fresh PCG64 generator for the given tag tuple."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
