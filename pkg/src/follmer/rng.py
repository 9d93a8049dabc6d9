"""Counter-based stream splitting for reproducible Monte Carlo.

Stream seeds are derived by mixing (base_seed, stream_index) through the
splitmix64 finalizer.  The constants are fixed so that results are
reproducible across implementations:

    state  = (base_seed + (index + 1) * 0x9E3779B97F4A7C15) mod 2^64
    state ^= state >> 30;  state *= 0xBF58476D1CE4E5B9  (mod 2^64)
    state ^= state >> 27;  state *= 0x94D049BB133111EB  (mod 2^64)
    state ^= state >> 31

The additive step is injective in the index (the multiplier is odd) and the
finalizer is a bijection on 64-bit words, so distinct indices always give
distinct stream seeds.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def derive_stream_seed(base_seed: int, index) -> "int | np.ndarray":
    """Mix (base_seed, index) into a 64-bit stream seed.

    ``index`` may be an integer or an integer array; the result matches its
    shape.  Distinct indices give distinct seeds.
    """
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(base_seed & 0xFFFFFFFFFFFFFFFF) + (idx + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    if z.ndim == 0:
        return int(z)
    return z


def stream_generator(base_seed: int, index: int) -> np.random.Generator:
    """A PCG64 generator seeded from the derived stream seed."""
    return np.random.Generator(np.random.PCG64(derive_stream_seed(base_seed, index)))
