"""Counter-based hashing used wherever values must depend only on an index.

splitmix64 lets texture cells and MPC candidates draw "random" numbers keyed
on (seed, index) without sharing a sequential stream, so evaluation order and
chunking cannot change the values.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix(*keys):
    """Fold several integer keys (scalars or broadcastable arrays) into one hash."""
    h = np.uint64(0)
    for k in keys:
        if np.ndim(k) == 0:
            k = np.uint64(int(k) & _MASK64)
        else:
            k = np.asarray(k).astype(np.int64).astype(np.uint64)
        h = splitmix64(h ^ k)
    return h


def uniform01(h):
    """Map 64-bit hashes to floats in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
