"""Seeded reference-weight generator.

Algorithm (pinned so weight files can be regenerated anywhere):

* each named tensor gets its own stream, seeded with
  ``splitmix64(seed ^ fnv1a64(name))``;
* the stream is xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D);
* uniforms in (0, 1) take the top 53 bits: ``((x >> 11) + 0.5) * 2**-53``;
* normals come from Box-Muller pairs ``(r cos t, r sin t)`` with
  ``r = sqrt(-2 ln u1)``, ``t = 2 pi u2``, emitted in that order;
* values are produced in float64 and cast to the requested dtype.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
WEIGHT_SCALE = 0.02


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniforms(self, n: int) -> list[float]:
        out = []
        x = self.state
        for _ in range(n):
            x ^= x >> 12
            x ^= (x << 25) & MASK64
            x ^= x >> 27
            out.append((((x * 0x2545F4914F6CDD1D) & MASK64) >> 11) * 2.0**-53 + 2.0**-54)
        self.state = x
        return out

    def normals(self, n: int) -> np.ndarray:
        u = self.uniforms(2 * ((n + 1) // 2))
        out = np.empty(len(u), dtype=np.float64)
        for i in range(0, len(u), 2):
            r = math.sqrt(-2.0 * math.log(u[i]))
            t = 2.0 * math.pi * u[i + 1]
            out[i] = r * math.cos(t)
            out[i + 1] = r * math.sin(t)
        return out[:n]


def stream(seed: int, name: str) -> XorShift64Star:
    return XorShift64Star((seed & MASK64) ^ fnv1a64(name.encode("utf-8")))


def gaussian(seed: int, name: str, shape, scale: float = WEIGHT_SCALE, dtype=np.float32) -> np.ndarray:
    shape = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    return (stream(seed, name).normals(n) * scale).reshape(shape).astype(dtype)
