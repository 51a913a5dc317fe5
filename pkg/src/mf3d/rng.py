"""Seedable pseudo-random generator with a pinned algorithm.

Fixtures and training runs must be reproducible bit-for-bit across machines
and across reimplementations, so the generator is spelled out rather than
taken from a platform library: xoshiro256** (Blackman & Vigna, public
domain), seeded by expanding a single integer through splitmix64.

Derived draws are defined exactly:
  random()      = (next_u64() >> 11) * 2**-53            (53-bit, in [0, 1))
  randbelow(n)  = next_u64() % n                         (bias <= n / 2**64)
  sample(n, m)  = partial Fisher-Yates over range(n), m swaps
  normals(...)  = Box-Muller pairs on random() draws
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** stream over 64-bit words."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        sm = seed & _MASK
        state = []
        for _ in range(4):
            sm, word = _splitmix64(sm)
            state.append(word)
        # xoshiro must not start from the all-zero state
        if not any(state):
            state[0] = 0x9E3779B97F4A7C15
        self._s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def randoms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=np.float64)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return self.next_u64() % n

    def sample(self, n: int, m: int) -> np.ndarray:
        """m distinct indices drawn uniformly from range(n), without replacement."""
        if not 0 <= m <= n:
            raise ValueError(f"cannot sample {m} of {n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(m):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.sample(n, n)

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller, column-major over the flat array."""
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self.randoms(pairs)  # (0, 1]: keeps log finite
        u2 = self.randoms(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return out[:count].reshape(shape)

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream."""
        return Rng(self.next_u64())

    def get_state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def set_state(self, state) -> None:
        state = [int(w) & _MASK for w in state]
        if len(state) != 4:
            raise ValueError("xoshiro256 state has 4 words")
        self._s = state
