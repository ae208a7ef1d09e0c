"""Named, splittable random streams.

Every stochastic consumer (weight init, shuffling, the random gate, the
environment) draws from its own counter-based Philox stream, keyed by the
run seed plus a stable stream name. Streams are independent of each other
and of the order in which they are created.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _digest(seed: int, name: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=16).digest()


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name)."""
    key = np.frombuffer(_digest(seed, name), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive(seed: int, name: str) -> int:
    """Child seed for (seed, name), for nested consumers that seed themselves."""
    return int.from_bytes(_digest(seed, name)[:8], "little")
