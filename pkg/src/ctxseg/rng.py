"""Counter-based deterministic random number generation.

Every stochastic choice in the package (dropout masks, latent noise,
scene layout, embedding maps, weight init) flows through an ``RngState``.
The state is just ``(seed, counter)``; each draw instantiates a fresh
Philox generator keyed by the seed with the counter in the high word, so
identical ``(seed, counter)`` pairs reproduce bit-identical draws on any
platform, independent of how many values earlier draws consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Arbitrary fixed key half so that plain integer seeds do not collide with
# numpy's default Philox stream for the same integer.
_KEY_SALT = 0x9E3779B97F4A7C15


def _hash64(tag) -> int:
    """Stable 64-bit hash of a string/int tag (not Python's salted hash)."""
    data = str(tag).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class RngState:
    """Deterministic RNG handle with explicit (seed, counter) state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, _KEY_SALT], dtype=np.uint64)
        # Counter goes in the highest word: each draw owns 2**192 blocks.
        ctr = np.array([0, 0, 0, self.counter], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def _next(self) -> np.random.Generator:
        gen = self._generator()
        self.counter += 1
        return gen

    def normal(self, shape=()) -> np.ndarray:
        return self._next().normal(size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._next().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def choice(self, options, shape=()) -> np.ndarray:
        return self._next().choice(options, size=shape)

    def spawn(self, tag) -> "RngState":
        """Derive an independent child stream named by ``tag``."""
        return RngState(self.seed ^ _hash64(tag))

    def clone(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"
