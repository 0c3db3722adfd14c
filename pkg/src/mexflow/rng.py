"""Portable counter-based random number generator.

Streams are derived from a 64-bit splitmix-style mixer applied to a running
counter, so the i-th draw of a given (seed, stream) pair is the same on every
platform and every run. All downstream randomness (datasets, weight init,
dequantization noise, sampling) goes through this generator to keep runs
byte-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    # same finalizer on python ints (scalar path, no overflow warnings)
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


class Rng:
    """Seedable, stream-splittable generator of uniforms and normals."""

    def __init__(self, seed: int, stream: int = 0):
        salt = ((stream & _MASK) * 0x9E3779B97F4A7C15 + 1) & _MASK
        self._base = np.uint64(_mix_int((seed & _MASK) + salt) ^ _mix_int(salt))
        self._count = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _mix(self._base + idx * _GAMMA)

    def uniform(self, shape=()) -> np.ndarray:
        """U[0, 1) samples with 53 bits of precision."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller (rejection-free, portable)."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log is finite
        u1 = ((self._raw(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0**-53)
        u2 = (self._raw(pairs) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) (scaled uniforms; bias negligible for small ranges)."""
        u = self.uniform(shape)
        return (np.floor(u * (high - low)) + low).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform((n,))
        return np.argsort(keys, kind="stable")

    def split(self, stream: int) -> "Rng":
        """Derive an independent child stream; the parent state is untouched."""
        child = Rng(0)
        salted = int(self._base) + ((stream & _MASK) * 0x9E3779B97F4A7C15) + 0xD1B54A32D192ED03
        child._base = np.uint64(_mix_int(salted))
        child._count = 0
        return child
