"""Seed derivation.

Every random stream in the package comes from one integer seed. Child
seeds are derived with splitmix64 so that e.g. sample 17 of a dataset gets
the same stream no matter how many other samples are generated or in which
order.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _key_bits(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys) -> int:
    """Mix ``seed`` with a path of keys (ints or strings) into a 64-bit seed."""
    h = splitmix64(int(seed) & _MASK)
    for key in keys:
        h = splitmix64(h ^ _key_bits(key))
    return h


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
