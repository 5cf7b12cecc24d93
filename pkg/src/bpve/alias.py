"""Walker/Vose alias tables for O(1) sampling from a finite distribution."""

from __future__ import annotations

import numpy as np


class AliasTable:
    """Sample indices 0..K with given probabilities in constant time per draw.

    :param probabilities: nonnegative weights; normalised internally.
    """

    def __init__(self, probabilities):
        p = np.asarray(probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or p.sum() <= 0:
            raise ValueError("alias table needs a nonempty nonnegative weight vector")
        K = p.size
        scaled = p * (K / p.sum())
        prob = np.ones(K)
        alias = np.arange(K)
        small = [i for i in range(K) if scaled[i] < 1.0]
        large = [i for i in range(K) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        for i in small + large:
            prob[i] = 1.0
        self.prob = prob
        self.alias = alias
        self.size = K
        self._single = int(np.flatnonzero(p)[0]) if np.count_nonzero(p) == 1 else None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self._single is not None:
            return np.full(n, self._single, dtype=np.int64)
        idx = rng.integers(0, self.size, size=n)
        u = rng.random(n)
        return np.where(u < self.prob[idx], idx, self.alias[idx])
