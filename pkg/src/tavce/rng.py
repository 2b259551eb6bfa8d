"""SplitMix64 integer stream with Box-Muller Gaussians.

The stream is evaluated in vectorised ``uint64`` arithmetic, which wraps
modulo 2**64 exactly like the scalar reference, so block draws and single
draws consume the state identically.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """Reference scalar step: returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministically fold ``keys`` into ``seed`` to name an independent stream."""
    state = seed & MASK64
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(key.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(key)
        state, out = splitmix64_scalar(state ^ (key & MASK64))
        state = out
    return state


class SeededRng:
    """Portable PRNG: identical seed gives bitwise-identical draws everywhere."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64_scalar(self.state)
        return out

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix(states)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) with 53 random bits each."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws via Box-Muller, consuming two uniforms per pair."""
        shape = (n,) if isinstance(n, int) else tuple(n)
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = _TWO_PI * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:count].reshape(shape)

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high) by rejection (no modulo bias)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return low + x % span

    def choice(self, candidates, size: int | None = None):
        """Uniform pick(s) from a sequence; ``size`` draws without replacement."""
        items = list(candidates)
        if size is None:
            return items[self.integer(0, len(items))]
        if size > len(items):
            raise ValueError("sample larger than population")
        # partial Fisher-Yates
        for k in range(size):
            swap = self.integer(k, len(items))
            items[k], items[swap] = items[swap], items[k]
        return items[:size]
