"""SplitMix64 generator with Box-Muller normals.

The stream is fully specified so another implementation can reproduce it:

* state advances by ``0x9E3779B97F4A7C15`` before every output, and the output is
  the standard SplitMix64 finalizer of the new state;
* ``uniform`` maps an output ``u`` to ``(u >> 11) * 2**-53`` in ``[0, 1)``;
* ``normal`` consumes uniforms in pairs ``(a, b)`` and emits
  ``r*cos(2*pi*b), r*sin(2*pi*b)`` with ``r = sqrt(-2*ln(1 - a))``;
* ``permutation(n)`` is the stable argsort of ``n`` raw outputs.

Each ``normal`` call consumes ``ceil(n/2)`` pairs; an odd request drops the
last sine value, so ``normal()`` twice differs from ``normal(2)``.

Because the k-th output only depends on ``seed + k*GOLDEN`` the draws are
generated in vectorized blocks.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def derive_seed(seed: int, *labels: object) -> int:
    """Independent 64-bit child seed for a labelled sub-stream."""
    text = ":".join([str(int(seed) & _MASK), *map(str, labels)])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        out = mix64(np.uint64(self.state) + steps)
        self.state = (self.state + n * GOLDEN) & _MASK
        return out

    def _next(self) -> int:
        self.state = (self.state + GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self, size=None):
        if size is None:
            return (self._next() >> 11) * 2.0**-53
        n = int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(size)

    def normal(self, size=None):
        if size is None:
            a, b = self.uniform(), self.uniform()
            return math.sqrt(-2.0 * math.log1p(-a)) * math.cos(2.0 * math.pi * b)
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1).reshape(-1)[:n]
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def gamma(self, shape: float) -> float:
        """Marsaglia-Tsang gamma draw with unit scale."""
        if shape <= 0:
            raise ValueError("gamma shape must be positive")
        if shape < 1.0:
            # boost: G(a) = G(a + 1) * U^(1/a)
            g = self.gamma(shape + 1.0)
            return g * (1.0 - self.uniform()) ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0:
                continue
            u = 1.0 - self.uniform()
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def beta(self, a: float, b: float) -> float:
        x = self.gamma(a)
        y = self.gamma(b)
        return x / (x + y)
