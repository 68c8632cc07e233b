"""Deterministic derivation of independent RNG streams from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(seed: int, tags) -> list[int]:
    ents = [int(seed)]
    for t in tags:
        ents.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t))
    return ents


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for the (seed, *tags) stream; tags are ints or short strings."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, tags)))


def derive(seed: int, *tags) -> int:
    """Stable integer sub-seed for the (seed, *tags) stream."""
    return int(np.random.SeedSequence(_entropy(seed, tags)).generate_state(1)[0])
