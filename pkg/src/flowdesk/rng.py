"""Deterministic, splittable random numbers.

The generator is SplitMix64: a Weyl-sequence counter pushed through an
xorshift-multiply finalizer. Because output ``i`` depends only on
``state + i * GAMMA`` a block of draws is computed in one vectorized pass,
and independent child streams come from hashing ``(seed, stream_id)``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded stream of 64-bit words with uniform and Gaussian helpers."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        self._state = _mix_int(self.seed ^ 0x6A09E667F3BCC909)

    def derive(self, stream_id: int) -> "Rng":
        """Independent child stream; does not advance this generator."""
        child = Rng.__new__(Rng)
        child.seed = _mix_int(self.seed + _mix_int(int(stream_id) * GAMMA + 1))
        child._state = _mix_int(child.seed ^ 0x6A09E667F3BCC909)
        return child

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        if n < 0:
            raise ValueError("draw count must be non-negative")
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self._state) + k * np.uint64(GAMMA)
        self._state = (self._state + n * GAMMA) & _MASK
        return _mix_array(z)

    def uniform(self, size=None) -> np.ndarray | float:
        """Doubles in [0, 1) with 53 random bits."""
        shape = () if size is None else np.atleast_1d(size)
        n = int(np.prod(shape)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(tuple(shape))

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws by the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(np.atleast_1d(size)))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return float(z[0]) if size is None else z.reshape(tuple(np.atleast_1d(size)))

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Integers in [0, high) via multiply-shift on 53-bit uniforms."""
        u = self.uniform(size if size is not None else 1)
        out = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out.ravel()[0]) if size is None else out

    def bernoulli(self, p: float, size=None) -> np.ndarray | bool:
        u = self.uniform(size if size is not None else 1)
        out = np.asarray(u) < p
        return bool(out.ravel()[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")
