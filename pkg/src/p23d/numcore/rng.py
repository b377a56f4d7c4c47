"""Seeded random streams with a fixed, documented algorithm.

Raw 64-bit words come from numpy's PCG64 bit generator (whose output for a
given seed is frozen across numpy releases). Everything derived from the raw
words is computed here rather than through ``numpy.random.Generator``, whose
distribution samplers are allowed to change between versions:

* uniform doubles: top 53 bits of a word, scaled by 2**-53, in [0, 1);
* standard normals: Box-Muller on pairs of uniforms, both outputs used.
"""
from __future__ import annotations

import numpy as np

ALGORITHM_ID = "pcg64-u53-boxmuller-v1"


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        ss = np.random.SeedSequence(self.seed)
        self._bits = np.random.PCG64(ss)

    def spawn(self, index: int) -> "Rng":
        """Independent child stream keyed by ``(seed, index)``."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._bits = np.random.PCG64(np.random.SeedSequence([self.seed, int(index)]))
        return child

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2, m))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return z[:n].reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in ``[0, high)``."""
        u = self.uniform(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def choice_weighted(self, weights: np.ndarray, n: int) -> np.ndarray:
        cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.uniform(n), side="right")
        return np.minimum(idx, len(cdf) - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    return shape


def rng_normal(rng: Rng, shape):
    from .tensor import Tensor

    return Tensor(rng.normal(shape))
