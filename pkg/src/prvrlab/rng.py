"""Seedable SplitMix64 stream, vectorized over numpy uint64.

SplitMix64 is a counter-based xorshift-multiply generator, so block ``i`` of
the stream is ``mix(seed + (i + 1) * GAMMA)`` and whole arrays can be drawn
without a Python-level loop. Output is identical on every platform.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_TWO53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream derived from this seed and ``key``."""
        base = int(_mix(np.array([self.state ^ np.uint64(key & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64))[0])
        return SplitMix64(base ^ (key * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF))

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(self.state + idx * _GAMMA)

    def random(self, size=None):
        n = int(np.prod(size)) if size is not None else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (loc + scale * z).reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError("integers: empty range")
        n = int(np.prod(size)) if size is not None else 1
        vals = low + np.floor(self.random(n) * span).astype(np.int64)
        return int(vals[0]) if size is None else vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.random(n)
        return np.argsort(keys, kind="stable")
