"""Finite-support offspring laws and their generating-function queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from bpve.errors import DegenerateEnvironmentError, DomainError

WEIGHT_TOLERANCE = 1e-12
DEFAULT_TAIL_MASS = 1e-12


def _falling_factorial(values: np.ndarray, order: int) -> np.ndarray:
    out = np.ones_like(values, dtype=float)
    for i in range(order):
        out = out * (values - i)
    return out


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Offspring distribution on {0, ..., max_support}.

    ``weights[k]`` is the probability of exactly ``k`` children. Laws built from
    parametric families with unbounded support are cut at a high quantile and the
    removed tail is added to the largest retained atom; the moved probability is
    kept in ``folded_tail``.
    """

    weights: np.ndarray
    folded_tail: float = 0.0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if w.size == 0:
            raise DomainError("an offspring law needs at least one weight")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise DomainError("offspring weights must be finite and nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise DomainError(f"offspring weights sum to {total!r}, not 1")
        w = w / total
        # strip trailing zero atoms so max_support is the true support maximum
        nz = np.flatnonzero(w)
        w = w[: nz[-1] + 1]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    # ------------------------------------------------------------------ builders
    @classmethod
    def point_mass(cls, k: int) -> "OffspringLaw":
        w = np.zeros(k + 1)
        w[k] = 1.0
        return cls(w, label=f"delta_{k}")

    @classmethod
    def linear_fractional(cls, mean: float, second_factorial: float,
                          tail_mass: float = DEFAULT_TAIL_MASS) -> "OffspringLaw":
        """Law with f[0] = a and f[k] = (1-a)(1-b) b^(k-1) for k >= 1.

        The pair (a, b) is chosen so that f'(1) = ``mean`` and f''(1) =
        ``second_factorial``. The geometric law with weights 2^-(k+1) is the case
        mean 1, second factorial moment 2.
        """
        m, v = float(mean), float(second_factorial)
        if m <= 0 or v < 0:
            raise DomainError("linear-fractional law needs mean > 0 and f''(1) >= 0")
        b = v / (2.0 * m + v)
        a = 1.0 - m * (1.0 - b)
        if a < -1e-15:
            raise DomainError(
                f"no linear-fractional law has mean {m} and f''(1) = {v}; "
                "use the negative-binomial family or a larger f''(1)")
        a = max(a, 0.0)
        if b == 0.0:
            w = np.array([a, 1.0 - a])
            return cls(w, label="linear_fractional")
        # smallest K with P(xi > K) = (1-a) b^K <= tail_mass
        if 1.0 - a <= tail_mass:
            K = 0
        else:
            K = int(np.ceil(np.log(tail_mass / (1.0 - a)) / np.log(b)))
            K = max(K, 1)
        k = np.arange(1, K + 1)
        w = np.empty(K + 1)
        w[0] = a
        w[1:] = (1.0 - a) * (1.0 - b) * b ** (k - 1)
        tail = (1.0 - a) * b ** K
        w[K] += tail
        return cls(w, folded_tail=float(tail), label="linear_fractional")

    @classmethod
    def negative_binomial(cls, mean: float, second_factorial: float,
                          tail_mass: float = DEFAULT_TAIL_MASS) -> "OffspringLaw":
        """Negative binomial law matched to f'(1) and f''(1); needs f''(1) > mean^2."""
        m, v = float(mean), float(second_factorial)
        if m <= 0 or v <= m * m:
            raise DomainError("negative-binomial law needs mean > 0 and f''(1) > mean^2")
        r = m * m / (v - m * m)
        p = r / (r + m)
        K = int(stats.nbinom.isf(tail_mass, r, p))
        K = max(K, 1)
        w = stats.nbinom.pmf(np.arange(K + 1), r, p)
        tail = float(stats.nbinom.sf(K, r, p))
        w[K] += tail
        w = w / w.sum()
        return cls(w, folded_tail=tail, label="negative_binomial")

    @classmethod
    def burst(cls, size: int) -> "OffspringLaw":
        """Law putting mass 1/size on ``size`` children and the rest on zero."""
        if size < 1:
            raise DomainError("burst size must be >= 1")
        w = np.zeros(size + 1)
        w[0] = 1.0 - 1.0 / size
        w[size] = 1.0 / size
        return cls(w, label=f"burst_{size}")

    # ------------------------------------------------------------------ queries
    @property
    def max_support(self) -> int:
        return self.weights.size - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.weights.size)

    @property
    def mean(self) -> float:
        return float(np.dot(self.support, self.weights))

    def factorial_moment(self, k: int) -> float:
        """E[xi (xi-1) ... (xi-k+1)] = f^(k)(1)."""
        if int(k) != k or k < 1:
            raise DomainError("factorial moment order must be a positive integer")
        if k > self.max_support:
            return 0.0
        return float(np.dot(_falling_factorial(self.support.astype(float), int(k)), self.weights))

    def pgf(self, s):
        s_arr = np.asarray(s, dtype=float)
        if np.any((s_arr < 0) | (s_arr > 1)):
            raise DomainError("pgf argument must lie in [0, 1]")
        out = np.polynomial.polynomial.polyval(s_arr, self.weights)
        return float(out) if np.ndim(out) == 0 else out

    def pgf_derivative(self, s, order: int = 1):
        if int(order) != order or order < 0:
            raise DomainError("derivative order must be a nonnegative integer")
        if order == 0:
            return self.pgf(s)
        s_arr = np.asarray(s, dtype=float)
        if np.any((s_arr < 0) | (s_arr > 1)):
            raise DomainError("pgf argument must lie in [0, 1]")
        if order > self.max_support:
            return 0.0 if np.ndim(s_arr) == 0 else np.zeros_like(s_arr)
        ks = self.support[order:].astype(float)
        coeffs = _falling_factorial(ks, int(order)) * self.weights[order:]
        out = np.polynomial.polynomial.polyval(s_arr, coeffs)
        return float(out) if np.ndim(out) == 0 else out

    def tail_probabilities(self) -> np.ndarray:
        """Array T with T[j] = P(xi > j) for j = 0..max_support-1."""
        return np.cumsum(self.weights[::-1])[::-1][1:]

    def one_minus_pgf_ratio(self, s):
        """(1 - f(s)) / (1 - s), evaluated as a polynomial without cancellation."""
        tails = self.tail_probabilities()
        if tails.size == 0:
            return 0.0 if np.ndim(s) == 0 else np.zeros_like(np.asarray(s, dtype=float))
        out = np.polynomial.polynomial.polyval(np.asarray(s, dtype=float), tails)
        return float(out) if np.ndim(out) == 0 else out

    def shape(self, s):
        """Shape function phi(s) with 1/(1-f(s)) = 1/((1-s) f'(1)) + phi(s).

        Both terms on the right are rewritten through the tail probabilities
        T_j = P(xi > j): (1-f(s))/(1-s) = sum_j T_j s^j and
        phi(s) = sum_i s^i sum_{j>i} T_j / (f'(1) sum_j T_j s^j),
        which is exact at s = 1 and free of cancellation near it.
        """
        s_arr = np.asarray(s, dtype=float)
        if np.any((s_arr < 0) | (s_arr > 1)):
            raise DomainError("shape function argument must lie in [0, 1]")
        tails = self.tail_probabilities()
        m = self.mean
        if m <= 0.0:
            raise DomainError("shape function undefined: f(s) = 1 for all s < 1")
        inner = np.cumsum(tails[::-1])[::-1][1:]  # sum_{j > i} T_j
        g = np.polynomial.polynomial.polyval(s_arr, tails)
        h = np.polynomial.polynomial.polyval(s_arr, inner) if inner.size else np.zeros_like(s_arr)
        out = h / (g * m)
        return float(out) if np.ndim(out) == 0 else out

    def tail_expectation(self, threshold: float, power: int = 1, strict: bool = True) -> float:
        """E[xi^power 1{xi > threshold}] (or >= when ``strict`` is False)."""
        ks = self.support
        mask = ks > threshold if strict else ks >= threshold
        return float(np.dot(ks[mask].astype(float) ** power, self.weights[mask]))

    def size_biased(self) -> "OffspringLaw":
        """Law of xi* with P(xi* = k) = k f[k] / f'(1)."""
        m = self.mean
        if m <= 0:
            raise DegenerateEnvironmentError("size-biasing needs f'(1) > 0")
        w = self.support * self.weights / m
        return OffspringLaw(w / w.sum(), label=f"size_biased({self.label})")

    def truncated(self, beta: int) -> "OffspringLaw":
        """Law of min(xi, beta)."""
        beta = int(beta)
        if beta < 0:
            raise DomainError("truncation level must be >= 0")
        if beta >= self.max_support:
            return self
        w = self.weights[: beta + 1].copy()
        w[beta] += self.weights[beta + 1:].sum()
        return OffspringLaw(w, label=f"min({self.label},{beta})")

    def thinned_survivors(self, keep: float) -> np.ndarray:
        """Weights of the number of children kept by independent thinning.

        Each child is kept with probability ``keep``; entry m of the returned array
        is P(kept = m), m = 0..max_support.
        """
        K = self.max_support
        if keep >= 1.0:
            return np.array(self.weights, dtype=float)
        ks = np.arange(K + 1)
        # pmf[k, m] = P(Bin(k, keep) = m)
        pmf = stats.binom.pmf(ks[None, :], ks[:, None], keep)
        return self.weights @ pmf

    def __repr__(self) -> str:
        label = f" {self.label}" if self.label else ""
        return f"OffspringLaw({label.strip() or 'custom'}, support<= {self.max_support}, mean={self.mean:.6g})"


def evaluate_law(law: OffspringLaw, query: str, *args):
    """Dispatch a named query: mean, kth_factorial_moment(k), pgf(s), pgf_derivative(s, order)."""
    if query == "mean":
        return law.mean
    if query == "kth_factorial_moment":
        (k,) = args
        return law.factorial_moment(k)
    if query == "pgf":
        (s,) = args
        return law.pgf(s)
    if query == "pgf_derivative":
        s, order = args
        return law.pgf_derivative(s, order)
    raise DomainError(f"unknown law query {query!r}")


def shape_function(law: OffspringLaw, s):
    return law.shape(s)
