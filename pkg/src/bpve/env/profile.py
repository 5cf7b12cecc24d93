"""Discrete aggregates of a resolved environment at scale N."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bpve.env.environment import EnvironmentSpec, ResolvedEnvironment, implicit_kappa
from bpve.errors import DegenerateEnvironmentError, DomainError


def horizon_generations(N: int, t: float) -> int:
    """floor(tN), robust to the rounding of t*N in floating point."""
    if t <= 0:
        raise DomainError("t must be positive")
    return int(np.floor(t * N + 1e-9))


@dataclass(frozen=True, eq=False)
class DiscreteProfile:
    """mu_0..mu_n, rho_bar^(N), the spine depth law p_bar and its cdf F_N.

    ``p_bar[i-1]`` is the probability of depth i (i = 1..n) and ``F_N[h-1]`` is
    the probability that the depth is at most h.
    """

    N: int
    t: float
    n: int
    kappa: float
    mu: np.ndarray
    means: np.ndarray
    f2: np.ndarray
    rho_bar: float
    p_bar: np.ndarray
    F_N: np.ndarray
    env: ResolvedEnvironment

    def depth_cdf(self, h):
        h = np.asarray(h)
        idx = np.clip(np.floor(h).astype(int), 0, self.n)
        cdf = np.concatenate(([0.0], self.F_N))
        return cdf[idx]

    def uniform_depth_law(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)


def _resolve(source, N: int, n: int, kappa: float | None):
    if isinstance(source, EnvironmentSpec):
        env = source.resolve(N, n)
        if kappa is None:
            kappa = source.kappa(N, n / N, env)
    elif isinstance(source, ResolvedEnvironment):
        env = source if source.horizon == n else source.restricted(n)
        if kappa is None:
            kappa = env.kappa_rule(N) if env.kappa_rule is not None else implicit_kappa(env, n)
    else:
        raise DomainError("expected an EnvironmentSpec or a ResolvedEnvironment")
    return env, float(kappa)


def build_profile(source, N: int, t: float = 1.0, kappa: float | None = None) -> DiscreteProfile:
    """mu, rho_bar^(N), p_bar and F_N for generations 1..floor(tN).

    rho_bar = mu_n / (2 kappa) * sum_{j<n} f''_{j+1}(1) / (mu_j f'_{j+1}(1)^2) and
    p_bar_i is the j = n - i term of that sum divided by 2 kappa rho_bar / mu_n.
    """
    n = horizon_generations(N, t)
    env, kappa = _resolve(source, N, n, kappa)
    means = env.means()
    if np.any(means <= 0):
        k = int(np.flatnonzero(means <= 0)[0]) + 1
        raise DegenerateEnvironmentError(f"generation {k} has zero mean offspring")
    f2 = env.second_factorial_moments()
    mu = np.concatenate(([1.0], np.cumprod(means)))
    if n == 0:
        raise DomainError("horizon floor(tN) must be at least 1")
    terms = mu[n] * f2 / (mu[:-1] * means ** 2)
    rho_bar = float(terms.sum() / (2.0 * kappa))
    if rho_bar <= 0:
        raise DegenerateEnvironmentError("all f''(1) vanish: the spine depth law is undefined")
    p_bar = terms[::-1] / terms.sum()
    F_N = np.cumsum(p_bar)
    F_N[-1] = 1.0
    for arr in (mu, means, f2, p_bar, F_N):
        arr.setflags(write=False)
    return DiscreteProfile(int(N), float(t), n, kappa, mu, means, f2, rho_bar, p_bar, F_N, env)


def rho_bar_riemann(profile: DiscreteProfile) -> float:
    """(1/2 kappa) sum_j (mu_n / mu_{j+1}) f''_{j+1}(1) / f'_{j+1}(1).

    Same quantity as ``profile.rho_bar``, written as a Riemann-Stieltjes sum of
    mu_n/mu against the increments of the summed second factorial moments.
    """
    mu = profile.mu
    return float(np.sum(mu[-1] / mu[1:] * profile.f2 / profile.means) / (2.0 * profile.kappa))


# ------------------------------------------------------------------ truncation
@dataclass(frozen=True)
class TruncationChoice:
    beta: int
    eps: float
    level: int
    mean_tail: float
    square_tail: float
    kappa: float
    attained: bool
    message: str = ""


def truncation_tail_sums(env: ResolvedEnvironment, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Arrays indexed by b of sum_k E[xi 1{xi > b}] and (1/kappa) sum_k E[xi^2 1{xi > b}]."""
    kmax = max(law.max_support for law in env.laws)
    counts = np.zeros(len(env.laws))
    for i, r in env.runs:
        counts[i] += r
    s1 = np.zeros(kmax + 1)
    s2 = np.zeros(kmax + 1)
    for law, c in zip(env.laws, counts):
        if c == 0:
            continue
        ks = law.support.astype(float)
        w = law.weights
        # E[xi^p 1{xi > b}] = reverse cumulative sum starting at b+1
        t1 = np.cumsum((ks * w)[::-1])[::-1]
        t2 = np.cumsum((ks * ks * w)[::-1])[::-1]
        m = law.max_support
        s1[:m] += c * t1[1:]
        s2[:m] += c * t2[1:]
    return s1, s2 / kappa


def select_truncation(source, N: int, t: float, eps_schedule, kappa: float | None = None) -> TruncationChoice:
    """Choose the truncation level beta_N for a decreasing schedule eps_1 > eps_2 > ...

    Levels are visited in order. At level k the candidate is the smallest integer
    b with sum_j E[xi_j 1{xi_j > b}] <= eps_k and (1/kappa_N) sum_j E[xi_j^2
    1{xi_j > b}] <= eps_k; the level is admissible when that b is at most kappa_N.
    The deepest admissible level wins. When even the first level is not
    admissible, the result reports the smallest eps achievable with b <= kappa_N.
    """
    eps = np.asarray(list(eps_schedule), dtype=float)
    if eps.size == 0 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise DomainError("eps_schedule must be a strictly decreasing sequence of positive numbers")
    n = horizon_generations(N, t)
    env, kappa = _resolve(source, N, n, kappa)
    s1, s2 = truncation_tail_sums(env, kappa)
    worst = np.maximum(s1, s2)
    best = None
    for level, e in enumerate(eps, start=1):
        ok = np.flatnonzero(worst <= e)
        b = int(ok[0])
        if b > kappa:
            break
        best = TruncationChoice(b, float(e), level, float(s1[b]), float(s2[b]), kappa, True)
    if best is not None:
        return best
    b = int(min(np.floor(kappa), s1.size - 1))
    achievable = float(worst[b])
    return TruncationChoice(b, achievable, 0, float(s1[b]), float(s2[b]), kappa, False,
                            f"no beta <= kappa_N = {kappa:g} reaches eps = {eps[0]:g}; "
                            f"smallest achievable eps is {achievable:.3g}")
