"""Limiting environment profiles (X_t, sigma^2(t), kappa_N) and Stieltjes integrals.

Both X and sigma^2 are stored as a continuous piecewise-linear part plus a finite
list of jumps. The continuous parts are given by values at increasing knots and
continue with their last slope beyond the final knot. sigma^2 is treated as the
distribution function of a measure on [0, infinity) with sigma^2(0-) = 0, so a
positive value at 0 is an atom at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate

from bpve.errors import DomainError

STIELTJES_RTOL = 1e-10


@dataclass(frozen=True)
class KappaRule:
    """kappa_N = scale * N**power."""

    scale: float = 1.0
    power: float = 1.0

    def __call__(self, N: float) -> float:
        return float(self.scale * float(N) ** self.power)

    @classmethod
    def from_config(cls, value) -> "KappaRule":
        if value is None or value == "N":
            return cls()
        if isinstance(value, KappaRule):
            return value
        if value == "sqrtN":
            return cls(1.0, 0.5)
        if isinstance(value, (int, float)):
            return cls(float(value), 1.0)
        if isinstance(value, Mapping):
            return cls(float(value.get("scale", 1.0)), float(value.get("power", 1.0)))
        raise DomainError(f"unrecognised kappa rule {value!r}")

    def to_config(self):
        return {"scale": self.scale, "power": self.power}


def _as_jumps(jumps) -> np.ndarray:
    arr = np.asarray(list(jumps) if jumps is not None else [], dtype=float)
    if arr.size == 0:
        return np.zeros((0, 2))
    arr = arr.reshape(-1, 2)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    if np.any(arr[:, 0] < 0):
        raise DomainError("jump times must be >= 0")
    if np.any(np.diff(arr[:, 0]) == 0):
        raise DomainError("jump times must be distinct")
    return arr


def _exprel_neg(z: np.ndarray) -> np.ndarray:
    """(1 - exp(-z)) / z with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    out[~nz] = 1.0 - z[~nz] / 2.0
    return out


@dataclass(frozen=True, eq=False)
class LimitProfile:
    x_knots: np.ndarray
    x_values: np.ndarray
    s2_knots: np.ndarray
    s2_values: np.ndarray
    x_jumps: np.ndarray
    s2_jumps: np.ndarray
    kappa: KappaRule = KappaRule()

    def __post_init__(self):
        xk = np.asarray(self.x_knots, dtype=float)
        xv = np.asarray(self.x_values, dtype=float)
        sk = np.asarray(self.s2_knots, dtype=float)
        sv = np.asarray(self.s2_values, dtype=float)
        for knots, values, name in ((xk, xv, "X"), (sk, sv, "sigma2")):
            if knots.ndim != 1 or knots.size < 2 or knots.size != values.size:
                raise DomainError(f"{name} needs at least two knots with matching values")
            if knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
                raise DomainError(f"{name} knots must start at 0 and increase strictly")
        if np.any(np.diff(sv) < -1e-15):
            raise DomainError("the continuous part of sigma2 must be nondecreasing")
        sv = sv - sv[0]
        xj = _as_jumps(self.x_jumps)
        sj = _as_jumps(self.s2_jumps)
        if np.any(sj[:, 1] < 0):
            raise DomainError("sigma2 jumps must be nonnegative")
        sj = sj[sj[:, 1] > 0]
        if xj.size and sj.size:
            common = np.isclose(xj[:, 0][:, None], sj[:, 0][None, :], rtol=0.0, atol=1e-12)
            if np.any(common):
                raise DomainError("X and sigma2 must not jump at the same time")
        for name, arr in (("x_knots", xk), ("x_values", xv), ("s2_knots", sk),
                          ("s2_values", sv), ("x_jumps", xj), ("s2_jumps", sj)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "kappa", KappaRule.from_config(self.kappa))
        self._build_cells()

    # ------------------------------------------------------------------ builders
    @classmethod
    def linear(cls, alpha: float = 0.0, sigma2: float = 1.0, x_jumps=(), s2_jumps=(),
               kappa=None) -> "LimitProfile":
        """X_u = alpha u plus jumps, sigma2(u) = sigma2 u plus jumps."""
        return cls(np.array([0.0, 1.0]), np.array([0.0, alpha]),
                   np.array([0.0, 1.0]), np.array([0.0, sigma2]),
                   x_jumps, s2_jumps, KappaRule.from_config(kappa))

    @classmethod
    def from_config(cls, cfg: Mapping) -> "LimitProfile":
        """Build from a mapping.

        Accepted keys: ``alpha`` and ``sigma2`` (linear parts), or ``x`` / ``s2``
        mappings with ``knots`` and ``values``; ``x_jumps`` and ``s2_jumps`` as
        lists of [time, size]; ``kappa`` as accepted by :class:`KappaRule`.
        """
        kappa = KappaRule.from_config(cfg.get("kappa"))
        if "x" in cfg:
            xk, xv = cfg["x"]["knots"], cfg["x"]["values"]
        else:
            xk, xv = [0.0, 1.0], [0.0, float(cfg.get("alpha", 0.0))]
        if "s2" in cfg:
            sk, sv = cfg["s2"]["knots"], cfg["s2"]["values"]
        else:
            sk, sv = [0.0, 1.0], [0.0, float(cfg.get("sigma2", 1.0))]
        return cls(np.asarray(xk, float), np.asarray(xv, float), np.asarray(sk, float),
                   np.asarray(sv, float), cfg.get("x_jumps", ()), cfg.get("s2_jumps", ()), kappa)

    def to_config(self) -> dict:
        return {
            "x": {"knots": self.x_knots.tolist(), "values": self.x_values.tolist()},
            "s2": {"knots": self.s2_knots.tolist(), "values": self.s2_values.tolist()},
            "x_jumps": self.x_jumps.tolist(),
            "s2_jumps": self.s2_jumps.tolist(),
            "kappa": self.kappa.to_config(),
        }

    # ------------------------------------------------------------- evaluation
    @staticmethod
    def _piecewise(knots, values, u):
        u = np.asarray(u, dtype=float)
        out = np.interp(u, knots, values)
        slope = (values[-1] - values[-2]) / (knots[-1] - knots[-2])
        beyond = u > knots[-1]
        if np.any(beyond):
            out = np.where(beyond, values[-1] + slope * (u - knots[-1]), out)
        return out

    @staticmethod
    def _jump_sum(jumps, u, side="right"):
        u = np.asarray(u, dtype=float)
        if jumps.size == 0:
            return np.zeros_like(u)
        cum = np.concatenate(([0.0], np.cumsum(jumps[:, 1])))
        return cum[np.searchsorted(jumps[:, 0], u, side=side)]

    def X(self, u):
        out = self._piecewise(self.x_knots, self.x_values, u) + self._jump_sum(self.x_jumps, u)
        return float(out) if np.ndim(out) == 0 else out

    def X_left(self, u):
        out = self._piecewise(self.x_knots, self.x_values, u) + self._jump_sum(self.x_jumps, u, "left")
        return float(out) if np.ndim(out) == 0 else out

    def sigma2(self, u):
        out = self._piecewise(self.s2_knots, self.s2_values, u) + self._jump_sum(self.s2_jumps, u)
        return float(out) if np.ndim(out) == 0 else out

    def sigma2_left(self, u):
        out = self._piecewise(self.s2_knots, self.s2_values, u) + self._jump_sum(self.s2_jumps, u, "left")
        return float(out) if np.ndim(out) == 0 else out

    def sigma2_density(self, u):
        """Density of the continuous part of sigma2 (right derivative)."""
        u = np.asarray(u, dtype=float)
        idx = self._cell_index(u)
        out = self._cell_rate[idx]
        return float(out) if np.ndim(out) == 0 else out

    def s2_jump_at(self, u: float) -> float:
        hit = np.isclose(self.s2_jumps[:, 0], u, rtol=0.0, atol=1e-14)
        return float(self.s2_jumps[hit, 1].sum())

    def x_jump_at(self, u: float) -> float:
        hit = np.isclose(self.x_jumps[:, 0], u, rtol=0.0, atol=1e-14)
        return float(self.x_jumps[hit, 1].sum())

    def breakpoints(self) -> np.ndarray:
        """Knots and jump times of both components, sorted and distinct."""
        return self._cells

    # ---------------------------------------------- closed-form e^{-X} integrals
    def _build_cells(self):
        pts = np.concatenate((self.x_knots, self.s2_knots, self.x_jumps[:, 0], self.s2_jumps[:, 0]))
        cells = np.unique(pts)
        # representative slopes on [cells[i], cells[i+1]) and beyond the last point
        probe = np.concatenate((0.5 * (cells[:-1] + cells[1:]), [cells[-1] + 1.0]))
        x_slope = self._slope(self.x_knots, self.x_values, probe)
        rate = self._slope(self.s2_knots, self.s2_values, probe)
        x_start = np.asarray(self.X(cells), dtype=float).reshape(-1)
        widths = np.diff(cells)
        pieces = rate[:-1] * np.exp(-x_start[:-1]) * widths * _exprel_neg(x_slope[:-1] * widths)
        cont_cum = np.concatenate(([0.0], np.cumsum(pieces)))
        if self.s2_jumps.size:
            atom_w = np.exp(-np.asarray(self.X(self.s2_jumps[:, 0]), dtype=float).reshape(-1)) * self.s2_jumps[:, 1]
            atom_cum = np.concatenate(([0.0], np.cumsum(atom_w)))
        else:
            atom_cum = np.zeros(1)
        for name, val in (("_cells", cells), ("_cell_xslope", x_slope), ("_cell_rate", rate),
                          ("_cell_xstart", x_start), ("_cont_cum", cont_cum), ("_atom_cum", atom_cum)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @staticmethod
    def _slope(knots, values, probe):
        slopes = np.diff(values) / np.diff(knots)
        idx = np.clip(np.searchsorted(knots, probe, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]

    def _cell_index(self, u):
        return np.clip(np.searchsorted(self._cells, u, side="right") - 1, 0, self._cells.size - 1)

    def exp_weighted_mass(self, v, include_atom_at_v: bool = True):
        """C(v) = integral over [0, v] of e^{-X_u} sigma2(du), closed form.

        With ``include_atom_at_v`` False the atom at v (if any) is excluded, which
        gives the left limit C(v-).
        """
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise DomainError("integration bounds must be >= 0")
        idx = self._cell_index(v)
        start = self._cells[idx]
        width = v - start
        part = (self._cell_rate[idx] * np.exp(-self._cell_xstart[idx]) * width
                * _exprel_neg(self._cell_xslope[idx] * width))
        cont = self._cont_cum[idx] + part
        if self.s2_jumps.size:
            side = "right" if include_atom_at_v else "left"
            atoms = self._atom_cum[np.searchsorted(self.s2_jumps[:, 0], v, side=side)]
        else:
            atoms = 0.0
        out = cont + atoms
        return float(out) if np.ndim(out) == 0 else out

    def exp_weighted_integral(self, a, b):
        """Integral over the closed interval [a, b] of e^{-X_u} sigma2(du)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.any(a > b):
            raise DomainError("interval must satisfy a <= b")
        out = np.asarray(self.exp_weighted_mass(b)) - np.asarray(self.exp_weighted_mass(a, False))
        return float(out) if np.ndim(out) == 0 else out


def stieltjes_integral(profile: LimitProfile, g: Callable[[float], float], a: float, b: float,
                       points: Sequence[float] = ()) -> float:
    """Integral of g over the closed interval [a, b] against sigma2(du).

    The continuous part is integrated cell by cell with adaptive quadrature at
    relative tolerance 1e-10; every atom of sigma2 inside [a, b], endpoints
    included, contributes g(u) times its size. ``points`` lists extra places
    where g is discontinuous.
    """
    if a > b:
        raise DomainError("stieltjes_integral needs a <= b")
    if a < 0:
        raise DomainError("sigma2 is a measure on [0, infinity)")
    cuts = np.unique(np.concatenate(([a, b], profile.breakpoints(), np.asarray(points, dtype=float))))
    cuts = cuts[(cuts >= a) & (cuts <= b)]
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        rate = float(profile.sigma2_density(0.5 * (lo + hi)))
        if rate == 0.0:
            continue
        val, _ = integrate.quad(lambda u: g(u), lo, hi, epsabs=0.0, epsrel=STIELTJES_RTOL, limit=200)
        total += rate * val
    jumps = profile.s2_jumps
    if jumps.size:
        inside = (jumps[:, 0] >= a) & (jumps[:, 0] <= b)
        for u, size in jumps[inside]:
            total += g(float(u)) * size
    return float(total)
