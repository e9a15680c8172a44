"""Deterministic random number generation.

The generator is xoshiro256++ seeded through splitmix64, implemented directly
on 64-bit integer arithmetic so that a given seed yields the identical draw
sequence on every platform and Python build. All stochastic behaviour in the
package (weight init, data generation, shuffling, mask sampling) flows through
this module; nothing uses ``random`` or numpy's generators.

Uniform doubles are produced as ``((x >> 11) + 0.5) * 2**-53`` which lies in
the open interval (0, 1), so draws can be fed to logit transforms directly.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256++ stream with a documented, platform-independent layout."""

    def __init__(self, seed: int = 57):
        self.seed = int(seed) & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, word = _splitmix64(s)
            state.append(word)
        self._s = state

    def _next64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def u01(self) -> float:
        """Uniform draw in the open interval (0, 1)."""
        return ((self._next64() >> 11) + 0.5) * 2.0**-53

    def u01_array(self, n: int) -> np.ndarray:
        return np.array([self.u01() for _ in range(n)], dtype=np.float64)

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Box-Muller transform; one fresh pair of uniforms per draw."""
        u1 = self.u01()
        u2 = self.u01()
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        out = np.empty(size, dtype=np.float64)
        for i in range(size):
            out[i] = self.normal(0.0, std)
        return out.reshape(shape)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on the top 64-bit range."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        limit = _MASK64 - (_MASK64 % n)
        while True:
            x = self._next64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randbelow(len(items))]

    def get_state(self) -> dict:
        return {"seed": self.seed, "state": list(self._s)}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._s = [int(w) & _MASK64 for w in state["state"]]


def derive_seed(seed: int, stream: str) -> int:
    """Stable sub-stream seed for independent RNG consumers.

    Mixes the stream label into the seed via splitmix64 so e.g. data
    generation and training never share a draw sequence.
    """
    s = int(seed) & _MASK64
    for ch in stream.encode("utf-8"):
        s, _ = _splitmix64(s ^ ch)
    _, out = _splitmix64(s)
    return out
