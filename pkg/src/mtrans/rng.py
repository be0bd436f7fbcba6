"""Portable xorshift64* generator used for parameter initialization.

``lanes`` independent xorshift64* states advance in lockstep; one draw of
size n takes ceil(n / lanes) steps and reads outputs lane-major per step.
Lane ``i`` is seeded with splitmix64 applied to ``seed + i``, so the
stream is a pure function of (seed, lanes) on every platform.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def sub_seed(seed: int, stream: int) -> int:
    """Derive an independent 63-bit seed for a named stream."""
    return splitmix64(splitmix64(seed & _MASK) ^ (stream * 0xD1B54A32D192ED03 & _MASK)) >> 1


class XorShift64Star:
    def __init__(self, seed: int, lanes: int = 256):
        states = [splitmix64((seed + i) & _MASK) or 0x9E3779B97F4A7C15 for i in range(lanes)]
        self.state = np.array(states, dtype=np.uint64)

    def _step(self) -> np.ndarray:
        s = self.state
        s ^= s >> np.uint64(12)
        s ^= s << np.uint64(25)
        s ^= s >> np.uint64(27)
        return s * np.uint64(0x2545F4914F6CDD1D)

    def bits(self, n: int) -> np.ndarray:
        lanes = self.state.size
        steps = -(-n // lanes)
        out = np.empty((steps, lanes), dtype=np.uint64)
        for k in range(steps):
            out[k] = self._step()
        return out.reshape(-1)[:n]

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        # top 53 bits -> [0, 1)
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        """Box-Muller on pairs of uniforms."""
        m = -(-n // 2)
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return std * z[:n]
