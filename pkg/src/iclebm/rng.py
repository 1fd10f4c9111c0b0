"""Counter-based random streams.

Every draw is a pure function of ``(seed, tag, *index)``, so results do not
depend on batch layout or evaluation order.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    # splitmix64 finalizer
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_keys(seed, *keys):
    """Hash a seed and a sequence of (broadcastable) integer keys to uint64."""
    h = _mix(np.asarray(seed, dtype=np.uint64) & np.uint64(0xFFFFFFFFFFFFFFFF))
    for k in keys:
        h = _mix(h ^ np.asarray(k, dtype=np.uint64))
    return h


def _index_grids(shape):
    return np.meshgrid(*[np.arange(s, dtype=np.uint64) for s in shape], indexing="ij", sparse=True)


def counter_uniform(seed, tag, shape, prefix=()):
    """Uniform [0, 1) draws; element ``i`` is keyed by ``(seed, tag, *prefix, *i)``."""
    h = hash_keys(seed, tag, *prefix, *_index_grids(shape))
    u = (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return np.broadcast_to(u, shape).copy()


def counter_normal(seed, tag, shape, prefix=()):
    """Standard normal draws via Box-Muller on two keyed uniform streams."""
    u1 = 1.0 - counter_uniform(seed, tag, shape, prefix=(*prefix, 0))
    u2 = counter_uniform(seed, tag, shape, prefix=(*prefix, 1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(seed, *keys):
    """A 63-bit integer seed derived from ``seed`` and integer keys."""
    return int(hash_keys(seed, *keys) >> np.uint64(1))
