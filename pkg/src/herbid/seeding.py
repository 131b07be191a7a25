"""Deterministic RNG derivation shared by the split, augment, and train code.

All randomness flows through numpy's PCG64. A draw sequence is identified by
a (seed, stream) pair: the seed is user-facing configuration, the stream is
derived from context (class label, sample id, epoch) so parallel consumers
never share a sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_stream(*parts) -> int:
    """Hash arbitrary context values into a 64-bit stream id."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def make_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for the (seed, stream) pair; same pair, same draws."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.Generator(np.random.PCG64(ss))
