"""Seed derivation and the counter-based generator shared by every module.

All sub-seeds in the framework come from :func:`mix_seed`, so the random
stream a client sees in round ``t`` depends only on ``(seed, t, client)`` and
never on execution order.

The mixer is SplitMix64's finalizer::

    z = x + 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

``mix_seed(a, b, ...)`` starts from ``SEED_INIT`` and folds each part in with
``state = splitmix64(state ^ (part mod 2**64))``.

``counter_stream(key, n)`` yields ``splitmix64(key + k * GOLDEN)`` for
``k = 0..n-1``, which is the classic SplitMix64 output sequence seeded with
``key``. It is not a CSPRNG.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
SEED_INIT = 0x6A09E667F3BCC909

_GOLDEN_U = np.uint64(GOLDEN)
_MUL1_U = np.uint64(MUL1)
_MUL2_U = np.uint64(MUL2)


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integer parts into a single 64-bit seed."""
    state = SEED_INIT
    for part in parts:
        state = splitmix64(state ^ (int(part) & MASK64))
    return state


def rng_for(*parts: int) -> np.random.Generator:
    """A numpy Generator keyed by ``mix_seed(*parts)``."""
    return np.random.default_rng(mix_seed(*parts))


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN_U
    z = (z ^ (z >> np.uint64(30))) * _MUL1_U
    z = (z ^ (z >> np.uint64(27))) * _MUL2_U
    return z ^ (z >> np.uint64(31))


def counter_stream(key: int, n: int) -> np.ndarray:
    """``n`` 64-bit words from the counter-based mixer keyed by ``key``."""
    counters = np.arange(n, dtype=np.uint64) * _GOLDEN_U
    return _mix_array(counters + np.uint64(key & MASK64))
