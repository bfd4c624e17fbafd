"""Deterministic seed splitting.

A child seed is derived from a master seed and any number of keys (stage
names, indices)::

    state = master
    for key in keys:
        state = splitmix64(state ^ fnv1a64(str(key)))

``fnv1a64`` is the 64-bit FNV-1a hash of the UTF-8 key and ``splitmix64``
is the standard finalizer (Steele et al.). Results are plain Python ints in
``[0, 2**64)`` and feed ``numpy.random.default_rng``.
"""

import numpy as np

_MASK = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def child_seed(seed: int, *keys) -> int:
    state = int(seed) & _MASK
    for key in keys:
        state = splitmix64(state ^ fnv1a64(str(key)))
    return state


def rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *keys))
