"""Goodness-of-fit statistics and histogram binning."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import stats

from bpve.errors import DomainError


def ks_statistic(samples, cdf: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov distance and its asymptotic p-value.

    ``cdf`` is evaluated on the sorted sample; ties are handled by comparing the
    model with the empirical cdf on both sides of every jump.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise DomainError("KS statistic needs a nonempty sample")
    if n < 10:
        raise DomainError("KS statistic needs at least 10 samples")
    f = np.asarray(cdf(x), dtype=float).reshape(-1)
    # empirical cdf just after and just before each distinct value
    upper = np.searchsorted(x, x, side="right") / n
    lower = np.searchsorted(x, x, side="left") / n
    d = float(max(np.max(upper - f), np.max(f - lower), 0.0))
    return d, float(stats.kstwobign.sf(d * np.sqrt(n)))


def ks_lattice(samples, support, cdf_values) -> tuple[float, float]:
    """KS distance against a law carried by the finite ``support``.

    The empirical cdf is compared with ``cdf_values`` at every support point,
    which is the exact supremum when both laws live on the support. The
    asymptotic p-value is conservative for such discrete targets.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    support = np.asarray(support, dtype=float).ravel()
    f = np.asarray(cdf_values, dtype=float).ravel()
    if x.size < 10:
        raise DomainError("KS statistic needs at least 10 samples")
    if support.size != f.size or np.any(np.diff(support) <= 0):
        raise DomainError("support must be increasing and match the cdf values")
    if not np.all(np.isin(x, support)):
        raise DomainError("samples must lie on the support")
    ecdf = np.searchsorted(x, support, side="right") / x.size
    d = float(np.max(np.abs(ecdf - f)))
    return d, float(stats.kstwobign.sf(d * np.sqrt(x.size)))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov distance and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise DomainError("two-sample KS needs nonempty samples")
    grid = np.concatenate((a, b))
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    m = a.size * b.size / (a.size + b.size)
    return d, float(stats.kstwobign.sf(d * np.sqrt(m)))


def chi_square(counts, pmf, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Pearson chi-square of category counts against a pmf.

    Categories are pooled from the right until every retained category expects at
    least ``min_expected`` observations; the last category also absorbs the pmf
    mass beyond the listed categories. Returns (statistic, p-value, degrees of freedom).
    """
    counts = np.asarray(counts, dtype=float).ravel()
    pmf = np.asarray(pmf, dtype=float).ravel()
    if counts.size != pmf.size:
        raise DomainError("counts and pmf must have the same length")
    total = counts.sum()
    if total <= 0:
        raise DomainError("chi-square needs at least one observation")
    probs = pmf.copy()
    probs[-1] += max(0.0, 1.0 - pmf.sum())
    expected = total * probs
    obs_cells, exp_cells = [], []
    acc_o = acc_e = 0.0
    # pool from the right: tail categories are the sparse ones
    for o, e in zip(counts[::-1], expected[::-1]):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if obs_cells:
            obs_cells[-1] += acc_o
            exp_cells[-1] += acc_e
        else:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
    if len(obs_cells) < 2:
        raise DomainError("all mass falls into one category after pooling")
    o = np.array(obs_cells)
    e = np.array(exp_cells)
    stat = float(np.sum((o - e) ** 2 / e))
    dof = len(o) - 1
    return stat, float(stats.chi2.sf(stat, dof)), dof


def category_counts(values, max_category: int) -> np.ndarray:
    """Counts of integer values 1..max_category, with larger values in the last cell."""
    v = np.minimum(np.asarray(values, dtype=np.int64), max_category)
    return np.bincount(v, minlength=max_category + 1)[1:]


def fd_bins(samples, min_bins: int = 20) -> np.ndarray:
    """Freedman-Diaconis bin edges with at least ``min_bins`` bins."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("cannot bin an empty sample")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        hi = lo + 1.0
    q75, q25 = np.percentile(x, [75, 25])
    width = 2.0 * (q75 - q25) / np.cbrt(x.size)
    bins = int(np.ceil((hi - lo) / width)) if width > 0 else min_bins
    return np.linspace(lo, hi, max(bins, min_bins) + 1)


def histogram_table(samples, density: Callable[[np.ndarray], np.ndarray] | None = None,
                    min_bins: int = 20) -> dict:
    """Binned density of the sample and a theoretical curve at the bin midpoints."""
    edges = fd_bins(samples, min_bins)
    hist, _ = np.histogram(samples, bins=edges, density=True)
    mids = 0.5 * (edges[:-1] + edges[1:])
    table = {"bin_left": edges[:-1], "bin_right": edges[1:], "midpoint": mids, "empirical": hist}
    if density is not None:
        table["theoretical"] = np.asarray(density(mids), dtype=float)
    return table
