"""Limiting genealogies: the environmental coalescent point process and its laws.

Depths s are measured backwards from the horizon t, so s lies in [0, t]. With
C(v) the integral of e^{-X_u} over [0, v] against sigma2(du),

    F(s) = (C(t) - C((t-s)-)) / C(t),   rho_bar = e^{X_t} C(t) / 2,

and the wall measure of the CPP has tail nu_e((s, t]) = 1/(rho_bar F(s)) - 1/rho_bar.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special, stats

from bpve.env.limit import LimitProfile, stieltjes_integral
from bpve.errors import DomainError, HypothesisViolationError
from bpve.ultrametric import UltrametricEncoding

QUANTILE_TOL = 1e-12
MIXTURE_RTOL = 1e-8


class MixtureQuadratureWarning(RuntimeWarning):
    """The mixture quadrature did not reach the requested tolerance."""


@dataclass(frozen=True, eq=False)
class CppLaw:
    """The split-time law F on [0, t] and the mass scale rho_bar of an environmental CPP."""

    profile: LimitProfile
    t: float
    rho_bar: float
    total: float  # C(t)
    jump_depths: np.ndarray  # depths where F jumps (atoms of sigma2 at t - s)

    # ------------------------------------------------------------ split law
    def F(self, s):
        """P(H <= s) for the split depth H of two CPP leaves, closed-interval convention."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or np.any(s > self.t + 1e-12):
            raise DomainError(f"depth must lie in [0, {self.t}]")
        s = np.minimum(s, self.t)
        lower = np.asarray(self.profile.exp_weighted_mass(self.t - s, include_atom_at_v=False))
        out = np.clip((self.total - lower) / self.total, 0.0, 1.0)
        out = np.where(s >= self.t, 1.0, out)
        return float(out) if out.ndim == 0 else out

    def F_left(self, s):
        """Left limit F(s-): the atom of sigma2 at t - s is left out."""
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0) or np.any(s > self.t + 1e-12):
            raise DomainError(f"depth must lie in (0, {self.t}]")
        lower = np.asarray(self.profile.exp_weighted_mass(np.maximum(self.t - s, 0.0)))
        out = np.clip((self.total - lower) / self.total, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def F_quadrature(self, s: float) -> float:
        """F(s) through adaptive Stieltjes quadrature; an independent evaluation path."""
        t = self.t
        xt = float(self.profile.X(t))
        val = stieltjes_integral(self.profile, lambda u: math.exp(xt - float(self.profile.X(u))), t - s, t)
        return val / (2.0 * self.rho_bar)

    def F_inv(self, y):
        """Right-continuous inverse inf{s in [0, t] : F(s) > y}, with F_inv(1) = t.

        Monotone bisection to 1e-12 in s; results within the tolerance of a jump
        depth of F are snapped onto it so that ties stay exact.
        """
        y = np.asarray(y, dtype=float)
        if np.any(y < 0) or np.any(y > 1):
            raise DomainError("F_inv argument must lie in [0, 1]")
        flat = np.atleast_1d(y).ravel()
        lo = np.zeros(flat.size)
        hi = np.full(flat.size, self.t)
        iters = int(math.ceil(math.log2(max(self.t, 1e-300) / (QUANTILE_TOL / 4)))) + 1
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            above = self.F(mid) > flat
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        out = hi
        if self.jump_depths.size:
            near = np.abs(out[:, None] - self.jump_depths[None, :]) <= QUANTILE_TOL
            hit = near.any(axis=1)
            out[hit] = self.jump_depths[np.argmax(near[hit], axis=1)]
        out[flat >= 1.0] = self.t
        out = out.reshape(np.shape(y))
        return float(out) if out.ndim == 0 else out

    def nu_tail(self, s):
        """nu_e((s, t]) = 1/(rho_bar F(s)) - 1/rho_bar (infinite where F vanishes)."""
        f = np.asarray(self.F(s), dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(f > 0, 1.0 / (self.rho_bar * np.where(f > 0, f, 1.0)) - 1.0 / self.rho_bar, np.inf)
        return float(out) if out.ndim == 0 else out

    def summary(self, grid: int = 101) -> dict:
        s = np.linspace(0.0, self.t, grid)
        return {
            "t": self.t,
            "rho_bar": self.rho_bar,
            "depth_grid": s.tolist(),
            "F": np.asarray(self.F(s)).tolist(),
            "nu_tail": [None if not np.isfinite(v) else float(v) for v in np.asarray(self.nu_tail(s))],
            "jump_depths": self.jump_depths.tolist(),
        }

    def to_json(self, grid: int = 101) -> str:
        return json.dumps(self.summary(grid), indent=2)


def make_cpp_law(profile: LimitProfile, t: float, require_increase: bool = True) -> CppLaw:
    """CPP law at horizon t.

    rho_bar is computed by Stieltjes quadrature and checked against the closed
    form used for F. With ``require_increase`` (the default) t must be a
    continuity point of sigma2 at which sigma2 strictly increases.
    """
    if t <= 0:
        raise DomainError("t must be positive")
    if require_increase:
        if profile.s2_jump_at(t) > 0:
            raise HypothesisViolationError(f"sigma2 jumps at t = {t}")
        h = 1e-7 * t
        if not profile.sigma2_left(t) - profile.sigma2(t - h) > 0:
            raise HypothesisViolationError(f"sigma2 is flat just before t = {t}")
    xt = float(profile.X(t))
    rho_quad = 0.5 * stieltjes_integral(profile, lambda u: math.exp(xt - float(profile.X(u))), 0.0, t)
    total = float(profile.exp_weighted_mass(t))
    rho_closed = 0.5 * math.exp(xt) * total
    if not rho_closed > 0:
        raise HypothesisViolationError("rho_bar vanishes: sigma2 puts no mass on [0, t]")
    if abs(rho_quad - rho_closed) > 1e-8 * rho_closed:
        raise DomainError(f"rho_bar quadrature {rho_quad!r} disagrees with closed form {rho_closed!r}")
    jumps = profile.s2_jumps
    if jumps.size:
        inside = (jumps[:, 0] <= t) & (jumps[:, 0] >= 0)
        jump_depths = np.sort(t - jumps[inside, 0])
    else:
        jump_depths = np.zeros(0)
    jump_depths.setflags(write=False)
    return CppLaw(profile, float(t), float(rho_quad), total, jump_depths)


# ------------------------------------------------------------ H and H^theta
def h_cdf(law: CppLaw, s):
    return law.F(s)


def h_theta_cdf(law: CppLaw, theta: float, s):
    """P(H^theta <= s) = (1 + theta) F(s) / (1 + theta F(s))."""
    if theta < 0:
        raise DomainError("theta must be >= 0")
    f = np.asarray(law.F(s), dtype=float)
    out = (1.0 + theta) * f / (1.0 + theta * f)
    out = np.where(f >= 1.0, 1.0, out)
    return float(out) if out.ndim == 0 else out


def h_theta_quantile(law: CppLaw, theta, u):
    """Inverse of h_theta_cdf: F^{-1}(u / (1 + theta (1 - u)))."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise DomainError("theta must be >= 0")
    u = np.asarray(u, dtype=float)
    return law.F_inv(np.clip(u / (1.0 + theta * (1.0 - u)), 0.0, 1.0))


def _running_max_matrix(gaps: np.ndarray) -> np.ndarray:
    """Distance matrices from consecutive maxima: D[i, j] = max(gaps[i:j]) for i < j."""
    reps, m = gaps.shape
    k = m + 1
    out = np.zeros((reps, k, k))
    for i in range(k):
        run = np.zeros(reps)
        for j in range(i + 1, k):
            run = np.maximum(run, gaps[:, j - 1])
            out[:, i, j] = run
            out[:, j, i] = run
    return out


def _permute(mats: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply an independent uniform relabelling of the leaves to each matrix."""
    reps, k, _ = mats.shape
    perm = np.argsort(rng.random((reps, k)), axis=1)
    rows = np.arange(reps)[:, None, None]
    return mats[rows, perm[:, :, None], perm[:, None, :]]


def sample_cpp_ksample(law: CppLaw, k: int, rng: np.random.Generator, method: str = "direct",
                       size: int | None = None):
    """Total mass Z_e and the distance matrix of k uniform points of the CPP.

    ``direct`` draws Z_e ~ Exp(rho_bar), k uniform points and the largest wall in
    each gap by inverting P(max <= s | gap l) = exp(-l nu_e((s, t])).
    ``poissonized`` draws theta from the mixture weight, Z_e as a sum of k + 1
    exponential gaps with mean rho_bar / (1 + theta), and k - 1 i.i.d. H^theta.
    ``time_changed_brownian`` samples the Brownian CPP (walls dx/x^2 on (0, 1),
    unit mean mass) and maps every distance through F^{-1}, scaling mass by rho_bar.
    Returns arrays of shape (size,) and (size, k, k), or scalars when size is None.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    reps = 1 if size is None else int(size)
    if method == "direct":
        z = rng.exponential(law.rho_bar, reps)
        gaps = _uniform_gaps(z, k, rng)
        e = rng.exponential(1.0, gaps.shape)
        with np.errstate(divide="ignore"):
            y = 1.0 / (1.0 + law.rho_bar * e / gaps)
        walls = law.F_inv(np.nan_to_num(y, nan=0.0)) if gaps.size else gaps
    elif method == "poissonized":
        v = rng.random(reps) ** (1.0 / k)
        theta = v / (1.0 - v)
        lengths = rng.exponential(1.0, (reps, k + 1)) * (law.rho_bar / (1.0 + theta))[:, None]
        z = lengths.sum(axis=1)
        u = rng.random((reps, k - 1))
        walls = h_theta_quantile(law, theta[:, None], u) if k > 1 else np.zeros((reps, 0))
    elif method == "time_changed_brownian":
        zb = rng.exponential(1.0, reps)
        gaps = _uniform_gaps(zb, k, rng)
        e = rng.exponential(1.0, gaps.shape)
        db = 1.0 / (1.0 + e / gaps)
        walls = law.F_inv(db) if gaps.size else gaps
        z = law.rho_bar * zb
    else:
        raise DomainError(f"unknown sampling method {method!r}")
    walls = np.asarray(walls, dtype=float).reshape(reps, k - 1)
    mats = _permute(_running_max_matrix(walls), rng)
    if size is None:
        return float(z[0]), mats[0]
    return z, mats


def _uniform_gaps(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lengths between consecutive order statistics of k uniform points on (0, z)."""
    pts = np.sort(rng.random((z.size, k)), axis=1) * z[:, None]
    return np.diff(pts, axis=1)


def sample_poissonized(law: CppLaw, theta: float, rng: np.random.Generator):
    """Poisson sampling at rate theta / rho_bar on a CPP of mass Z_e ~ Exp(rho_bar).

    Returns (Z_e, encoding) where the encoding holds the sampled points in planar
    order with i.i.d. H^theta gaps; the encoding is None when no point is drawn.
    The number of points is geometric: P(K = j) = (theta/(1+theta))^j / (1+theta).
    """
    if theta < 0:
        raise DomainError("theta must be >= 0")
    count = int(rng.geometric(1.0 / (1.0 + theta))) - 1
    lengths = rng.exponential(law.rho_bar / (1.0 + theta), count + 1)
    z = float(lengths.sum())
    if count == 0:
        return z, None
    depths = np.asarray(h_theta_quantile(law, theta, rng.random(count - 1)), dtype=float).reshape(-1)
    return z, UltrametricEncoding(depths, law.t, unit="continuum")


def sample_cpp_encoding(law: CppLaw, rng: np.random.Generator, points: int):
    """A k-sample of the CPP as (Z_e, encoding) with leaves in planar order."""
    z = float(rng.exponential(law.rho_bar))
    gaps = _uniform_gaps(np.array([z]), points, rng)[0]
    e = rng.exponential(1.0, gaps.size)
    depths = np.asarray(law.F_inv(1.0 / (1.0 + law.rho_bar * e / gaps)), dtype=float).reshape(-1)
    return z, UltrametricEncoding(depths, law.t, unit="continuum")


# --------------------------------------------------------------- mixtures
def _mixture_weight_v(k: int, v):
    """Density of V = theta / (1 + theta) under the mixture: k v^(k-1)."""
    return k * np.power(v, k - 1)


def _threshold_table(law: CppLaw, k: int, phi, thresholds):
    """Representative matrices for every cell pattern of the k-1 gaps, permutation-averaged."""
    c = np.unique(np.asarray(thresholds, dtype=float))
    reps = np.concatenate((c, [law.t]))
    combos = list(itertools.product(range(c.size + 1), repeat=k - 1))
    perms = list(itertools.permutations(range(k)))
    values = np.empty(len(combos))
    for idx, combo in enumerate(combos):
        gaps = reps[list(combo)].reshape(1, -1)
        mat = _running_max_matrix(gaps)[0]
        values[idx] = np.mean([phi(mat[np.ix_(p, p)]) for p in perms])
    return c, np.array(combos, dtype=np.int64).reshape(len(combos), k - 1), values


def mixture_moment(law: CppLaw, k: int, phi: Callable[[np.ndarray], float],
                   thresholds: Sequence[float] | None = None, rtol: float = MIXTURE_RTOL,
                   inner_order: int | None = None, return_error: bool = False):
    """E[phi((H_{sigma_i, sigma_j}))] for the limiting k-sample split matrix.

    The theta-integral is computed over v = theta / (1 + theta) in (0, 1) by
    adaptive quadrature. When phi depends on the depths only through indicators
    1{d <= c} for c in ``thresholds`` the inner expectation is an exact finite sum
    over cells; otherwise it uses a Gauss-Legendre product rule in the quantile
    coordinates of the k - 1 i.i.d. H^theta. The leaf relabelling sigma is averaged
    exactly. A MixtureQuadratureWarning reports the achieved tolerance when the
    outer quadrature falls short.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    if k == 1:
        val = float(phi(np.zeros((1, 1))))
        return (val, 0.0) if return_error else val
    perms = list(itertools.permutations(range(k)))
    if thresholds is not None:
        c, combos, values = _threshold_table(law, k, phi, thresholds)

        def inner(v):
            theta = v / (1.0 - v)
            cdf = np.concatenate(([0.0], np.asarray(h_theta_cdf(law, theta, np.minimum(c, law.t))).reshape(-1), [1.0]))
            cell = np.diff(cdf)
            return float(np.dot(values, np.prod(cell[combos], axis=1)))
    else:
        order = inner_order or (96 if k == 2 else 24)
        nodes, weights = special.roots_legendre(order)
        u1 = 0.5 * (nodes + 1.0)
        w1 = 0.5 * weights
        grid = np.array(list(itertools.product(range(order), repeat=k - 1)), dtype=np.int64)
        u = u1[grid]
        w = np.prod(w1[grid], axis=1)

        def inner(v):
            theta = v / (1.0 - v)
            gaps = np.asarray(h_theta_quantile(law, theta, u), dtype=float).reshape(u.shape)
            mats = _running_max_matrix(gaps)
            vals = np.array([np.mean([phi(m[np.ix_(p, p)]) for p in perms]) for m in mats])
            return float(np.dot(w, vals))

    val, err = integrate.quad(lambda v: _mixture_weight_v(k, v) * inner(v), 0.0, 1.0,
                              epsabs=1e-14, epsrel=rtol, limit=200)
    if err > max(rtol * abs(val), 1e-14):
        warnings.warn(f"mixture quadrature reached absolute error {err:.3g} (requested relative {rtol:g})",
                      MixtureQuadratureWarning, stacklevel=2)
    return (float(val), float(err)) if return_error else float(val)


def mixture_cdf(law: CppLaw, s: float, k: int = 2) -> float:
    """P(d(U_1, U_2) <= s) for two of k uniform leaves, from the mixture."""
    return mixture_moment(law, k, lambda m: float(m[0, 1] <= s), thresholds=[s])


def pair_distance_cdf(law: CppLaw, s):
    """Closed form of the k = 2 split-depth cdf: 2F(-log F - (1 - F)) / (1 - F)^2."""
    f = np.asarray(law.F(s), dtype=float)
    return _pair_cdf_from_F(f)


def _pair_cdf_from_F(f: np.ndarray):
    f = np.asarray(f, dtype=float)
    a = 1.0 - f
    out = np.empty_like(f)
    small = a < 1e-4
    ok = ~small & (f > 0)
    out[ok] = 2.0 * f[ok] * (-np.log(f[ok]) - a[ok]) / a[ok] ** 2
    aa = a[small]
    out[small] = 2.0 * f[small] * (0.5 + aa / 3.0 + aa ** 2 / 4.0 + aa ** 3 / 5.0)
    out[f <= 0] = 0.0
    return float(out) if out.ndim == 0 else out


def pair_distance_jump(law: CppLaw, s: float) -> float:
    """Atom of the k = 2 split-depth law at depth s, from the jump of F at s."""
    hi = _pair_cdf_from_F(np.array(law.F(s)))
    lo = _pair_cdf_from_F(np.array(law.F_left(s)))
    return float(hi - lo)


def cpp_moment_exact(law: CppLaw, k: int) -> float:
    """Polynomial moment of the CPP with phi = 1: E[Z_e^k] = k! rho_bar^k."""
    return math.factorial(k) * law.rho_bar ** k


def gamma_mixture_density(x: float, k: int) -> float:
    """k * integral over theta of (1+theta)^-2 (theta/(1+theta))^(k-1) Gamma(k+1, theta+1) density at x."""
    def integrand(theta):
        return (k / (1.0 + theta) ** 2 * (theta / (1.0 + theta)) ** (k - 1)
                * stats.gamma.pdf(x, k + 1, scale=1.0 / (1.0 + theta)))
    val, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    return float(val)


def gw_split_time_density(alpha: float, t: float, s: Sequence[float]) -> float:
    """Joint density of the k - 1 split depths s_1..s_{k-1} for a nearly critical GW process.

    alpha != 0: k (alpha (e^{alpha t} - 1))^(k-1) int theta^(k-1)/(1+theta)^2
    prod e^{alpha s_i} / (theta (e^{alpha s_i} - 1) + e^{alpha t} - 1)^2 dtheta.
    alpha = 0: k t^-(k-1) int theta^(k-1)/(1+theta)^2 prod (1 + theta s_i/t)^-2 dtheta.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    k = s.size + 1
    if np.any(s < 0) or np.any(s > t):
        return 0.0
    if alpha == 0.0:
        def integrand(theta):
            return theta ** (k - 1) / (1.0 + theta) ** 2 * np.prod(1.0 / (1.0 + theta * s / t) ** 2)
        const = k * t ** (-(k - 1))
    else:
        et = math.expm1(alpha * t)
        es = np.expm1(alpha * s)

        def integrand(theta):
            return (theta ** (k - 1) / (1.0 + theta) ** 2
                    * np.prod(np.exp(alpha * s) / (theta * es + et) ** 2))
        const = k * (alpha * et) ** (k - 1)
    val, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-11, limit=400)
    return float(const * val)


# -------------------------------------------------------- reduced process
def yule_time(law: CppLaw, s: float, right_limit: bool = False) -> float:
    """u(s) = log(int_[0,t] e^{-X} dsigma2 / int_[s,t] e^{-X} dsigma2) for 0 <= s < t.

    With ``right_limit`` the atom at s is left out of the denominator, giving u(s+).
    """
    if not 0 <= s < law.t:
        raise DomainError(f"s must lie in [0, {law.t})")
    tail = law.total - float(law.profile.exp_weighted_mass(s, include_atom_at_v=right_limit))
    if tail <= 0:
        raise DomainError("no variance on [s, t]")
    return math.log(law.total / tail)


def yule_reduced_pmf(law: CppLaw, s: float, j):
    """P(L = j) for the number of lineages at time s: geometric with success e^{-u(s)}."""
    p = math.exp(-yule_time(law, s))
    j = np.asarray(j)
    if np.any(j < 1):
        raise DomainError("j must be >= 1")
    out = p * (1.0 - p) ** (j - 1)
    return float(out) if out.ndim == 0 else out


def yule_increment_tail(law: CppLaw, s1: float, s2: float, j: int = 2,
                        s2_right_limit: bool = False) -> float:
    """P(L_{s2} - L_{s1} >= j) for the time-changed Yule process, s1 <= s2 < t.

    ``s2_right_limit`` evaluates the second count just after time s2, so s1 = s2
    gives the increment across an atom of sigma2 at s1.

    Given L_{s1} = m, each lineage independently becomes a geometric number of
    lineages with success q = e^{-(u(s2) - u(s1))}. Closed forms are used for
    j <= 2; larger j sums the exact negative-binomial mixture.
    """
    u1, u2 = yule_time(law, s1), yule_time(law, s2, s2_right_limit)
    if u2 < u1:
        raise DomainError("s2 must not precede s1")
    p1 = math.exp(-u1)
    q = math.exp(-(u2 - u1))
    r = 1.0 - (1.0 - p1) * q
    p0 = p1 * q / r
    if j <= 0:
        return 1.0
    if j == 1:
        return 1.0 - p0
    if j == 2:
        return 1.0 - p0 - (1.0 - q) * p1 * q / r ** 2
    # P(D = d) = sum_m P(L1 = m) NB(d; m, q)
    mmax = int(np.ceil(np.log(1e-16) / np.log(max(1.0 - p1, 1e-300)))) + 1 if p1 < 1 else 1
    m = np.arange(1, mmax + 1)
    pm = p1 * (1.0 - p1) ** (m - 1)
    d = np.arange(j)
    nb = stats.nbinom.pmf(d[:, None], m[None, :], q)
    return float(1.0 - np.sum(nb @ pm))


def survivor_count_law(law: CppLaw, s: float) -> tuple[float, float]:
    """(success of the geometric number of time-s ancestors, mean of each family's exponential mass).

    c = int_[0,s] e^{-X} dsigma2 / int_[s,t] e^{-X} dsigma2, success 1/(1 + c), and the
    exponential mean is (1/2) int_[s,t] e^{X_t - X_u} sigma2(du).
    """
    if not 0 <= s < law.t:
        raise DomainError(f"s must lie in [0, {law.t})")
    prof = law.profile
    head = float(prof.exp_weighted_mass(s))
    tail = law.total - float(prof.exp_weighted_mass(s, include_atom_at_v=False))
    if tail <= 0:
        raise DomainError("no variance on [s, t]")
    c = head / tail
    mean = 0.5 * math.exp(float(prof.X(law.t))) * tail
    return 1.0 / (1.0 + c), mean


def survival_asymptotic(profile: LimitProfile, t: float, kappa: float) -> float:
    """Kolmogorov estimate (2 / kappa_N) / int_[0,t] e^{-X} dsigma2."""
    total = float(profile.exp_weighted_mass(t))
    if total <= 0:
        raise DomainError("no variance on [0, t]")
    return 2.0 / (kappa * total)
