"""Deterministic seed derivation shared by all modules.

Every stochastic component derives its generator from a 64-bit master seed
mixed with structural indices (round, client id, pair index, ...), so
results never depend on execution order or worker count.
"""

import numpy as np

_MASK = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """Mix integers into a well-scrambled 64-bit seed (splitmix64 finalizer)."""
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        x = (int(p) ^ acc) & _MASK
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
        x = x ^ (x >> 31)
        acc = (acc + x + 0x9E3779B97F4A7C15) & _MASK
    return acc


def make_rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix64(*parts)))
