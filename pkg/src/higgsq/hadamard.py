"""Seeded Random Hadamard Transform over power-of-two blocks.

The transform is ``H @ (d * v)`` with ``H`` the unnormalized Sylvester
Hadamard matrix and ``d`` a seeded +-1 sign vector.  Normalization by
``1/sqrt(g)`` is left to the caller (the quantizer folds it into its scales).

Sign generation
---------------
Signs come from a SplitMix64 counter-mode generator so any implementation can
reproduce them bit for bit::

    mix(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
             z ^= z >> 27; z *= 0x94D049BB133111EB
             z ^= z >> 31                                  (all mod 2**64)
    key      = mix(seed ^ mix(g))
    word[k]  = mix(key + 0x9E3779B97F4A7C15 * (k + 1))
    sign[i]  = -1 if bit (i % 64) of word[i // 64] is set else +1

Bits are read least-significant first.  One sign vector is derived per
``(seed, g)`` and shared by every length-``g`` block of a tensor.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import InvalidArgument

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def is_power_of_two(g: int) -> bool:
    return g >= 1 and (g & (g - 1)) == 0


def _check_length(g: int) -> None:
    if not is_power_of_two(g):
        raise InvalidArgument(f"block length must be a power of two, got {g}")


@lru_cache(maxsize=64)
def _signs_cached(g: int, seed: int) -> np.ndarray:
    key = _mix64(seed ^ _mix64(g))
    n_words = (g + 63) // 64
    with np.errstate(over="ignore"):
        counters = np.arange(1, n_words + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        words = _mix64_array(counters + np.uint64(key))
    bits = (words[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    signs = 1.0 - 2.0 * bits.reshape(-1)[:g].astype(np.float64)
    signs.flags.writeable = False
    return signs


def sign_vector(g: int, seed: int) -> np.ndarray:
    """Deterministic +-1 vector of length ``g`` for ``seed`` (read-only)."""
    _check_length(g)
    if not 0 <= seed <= _MASK:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
    return _signs_cached(g, int(seed))


def fwht(v: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform along the last axis.

    Accepts a single vector or a stack of them.  ``fwht(fwht(v)) == g * v``.
    """
    x = np.array(v, dtype=np.float64, copy=True)
    g = x.shape[-1]
    _check_length(g)
    lead = x.shape[:-1]
    x = x.reshape(-1, g)
    h = 1
    while h < g:
        y = x.reshape(x.shape[0], g // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        x = np.stack((a + b, a - b), axis=2).reshape(-1, g)
        h *= 2
    return x.reshape(*lead, g)


def _signs_for(g: int, xi: int, unit_signs: bool) -> np.ndarray:
    if unit_signs:
        return np.ones(g)
    return sign_vector(g, xi)


def rht_forward(v: np.ndarray, xi: int, *, unit_signs: bool = False) -> np.ndarray:
    """Return ``H @ (d * v)`` for each length-g row of ``v``.

    ``unit_signs`` forces ``d = 1`` and exists for oracle comparisons only.
    """
    v = np.asarray(v, dtype=np.float64)
    g = v.shape[-1]
    _check_length(g)
    return fwht(v * _signs_for(g, xi, unit_signs))


def rht_inverse(v: np.ndarray, xi: int, *, unit_signs: bool = False) -> np.ndarray:
    """Inverse of :func:`rht_forward`: ``d * (H @ v) / g``."""
    v = np.asarray(v, dtype=np.float64)
    g = v.shape[-1]
    _check_length(g)
    return fwht(v) * (_signs_for(g, xi, unit_signs) / g)
