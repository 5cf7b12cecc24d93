"""Ultrametric measure spaces stored as consecutive-leaf coalescence depths.

A planar ultrametric tree with K leaves is encoded by H_1..H_{K-1}, where H_i is
the depth (time back from the horizon) of the most recent common ancestor of
leaves i and i+1. The distance between leaves i < j is max(H_i, ..., H_{j-1}).
Leaf indices are 0-based throughout.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from bpve.errors import DomainError, EnumerationLimitError

EXACT_MOMENT_LIMIT = 10**7


class RangeMaxQuery:
    """Sparse table answering max(values[lo:hi+1]) in O(1).

    :param values: array of comparable numbers.
    """

    def __init__(self, values: Sequence[float]):
        values = np.asarray(values)
        self.size = values.size
        levels = [values]
        width = 1
        while 2 * width <= self.size:
            prev = levels[-1]
            levels.append(np.maximum(prev[:-width], prev[width:]))
            width *= 2
        self.levels = levels

    @staticmethod
    def _ilog2(value):
        return np.floor(np.log2(value)).astype(np.int64)

    def query(self, lo: int, hi: int):
        """Maximum over the closed index range [lo, hi]."""
        if not 0 <= lo <= hi < self.size:
            raise IndexError(f"range [{lo}, {hi}] outside 0..{self.size - 1}")
        k = (hi - lo + 1).bit_length() - 1
        row = self.levels[k]
        return max(row[lo], row[hi - (1 << k) + 1])

    def query_many(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        out = np.empty(lo.shape, dtype=self.levels[0].dtype)
        k = self._ilog2(hi - lo + 1)
        for level in np.unique(k):
            sel = k == level
            row = self.levels[level]
            out[sel] = np.maximum(row[lo[sel]], row[hi[sel] - (1 << int(level)) + 1])
        return out


@dataclass(frozen=True, eq=False)
class UltrametricEncoding:
    """Leaves in planar order with consecutive coalescence depths and leaf masses.

    ``unit`` is ``"discrete"`` for integer generation depths and ``"continuum"``
    for real-valued depths.
    """

    depths: np.ndarray
    horizon: float
    masses: np.ndarray | None = None
    unit: str = "discrete"

    def __post_init__(self):
        if self.unit not in ("discrete", "continuum"):
            raise DomainError("unit must be 'discrete' or 'continuum'")
        dtype = np.int64 if self.unit == "discrete" else float
        d = np.asarray(self.depths, dtype=dtype).ravel()
        if d.size and (np.any(d <= 0) or np.any(d > self.horizon)):
            raise DomainError("depths must lie in (0, horizon]")
        d.setflags(write=False)
        object.__setattr__(self, "depths", d)
        if self.masses is not None:
            m = np.asarray(self.masses, dtype=float).ravel()
            if m.size != d.size + 1 or np.any(m < 0):
                raise DomainError("masses must be nonnegative, one per leaf")
            m.setflags(write=False)
            object.__setattr__(self, "masses", m)

    @property
    def leaf_count(self) -> int:
        return self.depths.size + 1

    @property
    def leaf_masses(self) -> np.ndarray:
        return self.masses if self.masses is not None else np.ones(self.leaf_count)

    @property
    def total_mass(self) -> float:
        return float(self.leaf_masses.sum())

    @cached_property
    def _rmq(self) -> RangeMaxQuery:
        return RangeMaxQuery(self.depths)

    def _check_index(self, i):
        i = np.asarray(i)
        if np.any(i < 0) or np.any(i >= self.leaf_count):
            raise IndexError(f"leaf index outside 0..{self.leaf_count - 1}")

    def distance(self, i: int, j: int):
        self._check_index([i, j])
        if i == j:
            return self.depths.dtype.type(0)
        lo, hi = min(i, j), max(i, j)
        return self._rmq.query(lo, hi - 1)

    def distances(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Vectorised pairwise distances between leaf index arrays."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        self._check_index(i)
        self._check_index(j)
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        out = np.zeros(lo.shape, dtype=self.depths.dtype)
        diff = lo != hi
        if np.any(diff):
            out[diff] = self._rmq.query_many(lo[diff], hi[diff] - 1)
        return out

    def distance_matrix(self, leaves: Sequence[int]) -> np.ndarray:
        leaves = np.asarray(leaves, dtype=np.int64)
        a, b = np.meshgrid(leaves, leaves, indexing="ij")
        return self.distances(a, b)

    # ------------------------------------------------------------ serialization
    def to_csv(self) -> str:
        buf = io.StringIO()
        write_encodings(buf, [self])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "UltrametricEncoding":
        encs = read_encodings(io.StringIO(text))
        if len(encs) != 1:
            raise DomainError(f"expected one encoding, found {len(encs)}")
        return encs[0]


def _format_number(x, unit: str) -> str:
    if unit == "discrete":
        return str(int(x))
    return repr(float(x))


def write_encodings(stream, encodings: Iterable[UltrametricEncoding]) -> None:
    """Write encodings as CSV records: a header row, a depth row and an optional mass row."""
    writer = csv.writer(stream, lineterminator="\n")
    for enc in encodings:
        horizon = _format_number(enc.horizon, enc.unit) if float(enc.horizon).is_integer() or enc.unit == "continuum" \
            else repr(float(enc.horizon))
        writer.writerow(["header", enc.leaf_count, horizon, enc.unit])
        writer.writerow(["depths"] + [_format_number(x, enc.unit) for x in enc.depths])
        if enc.masses is not None:
            writer.writerow(["masses"] + [repr(float(x)) for x in enc.masses])


def read_encodings(stream) -> list[UltrametricEncoding]:
    reader = csv.reader(stream)
    out: list[UltrametricEncoding] = []
    current = None
    for row in reader:
        if not row:
            continue
        tag = row[0]
        if tag == "header":
            if current is not None:
                out.append(_finish(current))
            K, horizon, unit = int(row[1]), row[2], row[3]
            current = {"K": K, "horizon": float(horizon) if unit == "continuum" else _parse_horizon(horizon),
                       "unit": unit, "depths": None, "masses": None}
        elif tag == "depths":
            conv = int if current["unit"] == "discrete" else float
            current["depths"] = [conv(x) for x in row[1:]]
        elif tag == "masses":
            current["masses"] = [float(x) for x in row[1:]]
        else:
            raise DomainError(f"unknown encoding record {tag!r}")
    if current is not None:
        out.append(_finish(current))
    return out


def _parse_horizon(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _finish(rec) -> UltrametricEncoding:
    depths = rec["depths"] if rec["depths"] is not None else []
    if len(depths) != rec["K"] - 1:
        raise DomainError("depth row does not match the leaf count in the header")
    return UltrametricEncoding(np.asarray(depths), rec["horizon"], rec["masses"], rec["unit"])


# ---------------------------------------------------------------- operations
def distance(enc: UltrametricEncoding, i: int, j: int):
    return enc.distance(i, j)


def _check_radius(enc: UltrametricEncoding, s: float):
    if s <= 0:
        raise DomainError("radius must be positive")


def reduced_process(enc: UltrametricEncoding, s: float) -> int:
    """Number of open balls of radius s: 1 + #{i : H_i >= s}."""
    _check_radius(enc, s)
    return 1 + int(np.count_nonzero(enc.depths >= s))


def reduced_process_steps(enc: UltrametricEncoding) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints and values of s -> reduced_process(enc, s).

    Returns (levels, counts): for levels[m-1] < s <= levels[m] the count is counts[m]
    (with levels[-1] treated as 0), and for s above the largest level it is 1.
    """
    levels = np.unique(enc.depths)
    counts = np.array([1 + int(np.count_nonzero(enc.depths >= v)) for v in levels], dtype=np.int64)
    return levels, counts


def ball_partition(enc: UltrametricEncoding, s: float) -> list[tuple[range, float]]:
    """Open balls of radius s as (leaf index range, mass), in planar order."""
    _check_radius(enc, s)
    cuts = np.flatnonzero(enc.depths >= s) + 1
    starts = np.concatenate(([0], cuts))
    stops = np.concatenate((cuts, [enc.leaf_count]))
    cum = np.concatenate(([0.0], np.cumsum(enc.leaf_masses)))
    return [(range(int(a), int(b)), float(cum[b] - cum[a])) for a, b in zip(starts, stops)]


def ball_masses(enc: UltrametricEncoding, s: float) -> np.ndarray:
    _check_radius(enc, s)
    cuts = np.flatnonzero(enc.depths >= s) + 1
    starts = np.concatenate(([0], cuts))
    return np.add.reduceat(enc.leaf_masses, starts)


def min_ball_mass(enc: UltrametricEncoding, s: float) -> float:
    return float(ball_masses(enc, s).min())


def sample_k(enc: UltrametricEncoding, k: int, rng: np.random.Generator, with_replacement: bool = True,
             return_leaves: bool = False):
    """k leaves drawn proportionally to their masses and their distance matrix."""
    if k < 1:
        raise DomainError("k must be >= 1")
    w = enc.leaf_masses
    total = w.sum()
    if total <= 0:
        raise DomainError("cannot sample from a space of zero mass")
    if not with_replacement and k > np.count_nonzero(w):
        raise DomainError(f"cannot draw {k} distinct leaves from {np.count_nonzero(w)} with positive mass")
    leaves = rng.choice(enc.leaf_count, size=k, replace=with_replacement, p=w / total)
    mat = enc.distance_matrix(leaves)
    return (mat, leaves) if return_leaves else mat


def polynomial_moment(enc: UltrametricEncoding, phi: Callable[[np.ndarray], float], k: int,
                      mode: str = "exact", reps: int = 10_000, rng: np.random.Generator | None = None):
    """Integral of phi(distance matrix) against the k-fold product of the leaf masses.

    Exact mode sums over all ordered k-tuples with repetition and returns a float;
    Monte Carlo mode returns (estimate, standard error).
    """
    K = enc.leaf_count
    w = enc.leaf_masses
    if mode == "exact":
        if K ** k > EXACT_MOMENT_LIMIT:
            raise EnumerationLimitError(
                f"{K}^{k} tuples exceed {EXACT_MOMENT_LIMIT}; use mode='monte_carlo'")
        total = 0.0
        for tup in itertools.product(range(K), repeat=k):
            weight = float(np.prod(w[list(tup)]))
            if weight == 0.0:
                continue
            total += weight * float(phi(enc.distance_matrix(tup)))
        return total
    if mode == "monte_carlo":
        if rng is None:
            raise DomainError("Monte Carlo mode needs an rng")
        mass = w.sum()
        vals = np.empty(reps)
        idx = rng.choice(K, size=(reps, k), replace=True, p=w / mass)
        for r in range(reps):
            vals[r] = phi(enc.distance_matrix(idx[r]))
        scale = mass ** k
        return float(scale * vals.mean()), float(scale * vals.std(ddof=1) / np.sqrt(reps))
    raise DomainError(f"unknown mode {mode!r}")


def restriction_bound(enc: UltrametricEncoding, keep: Iterable[int]) -> float:
    """Mass removed when restricting to ``keep``: an upper bound on the Gromov-Prohorov distance."""
    keep = np.unique(np.asarray(list(keep), dtype=np.int64))
    if keep.size == 0:
        raise DomainError("keep must be nonempty")
    enc._check_index(keep)
    w = enc.leaf_masses
    return float(w.sum() - w[keep].sum())


def restrict(enc: UltrametricEncoding, keep: Iterable[int]) -> UltrametricEncoding:
    """Sub-space on the kept leaves, still in planar order."""
    keep = np.unique(np.asarray(list(keep), dtype=np.int64))
    if keep.size == 0:
        raise DomainError("keep must be nonempty")
    enc._check_index(keep)
    depths = enc.distances(keep[:-1], keep[1:])
    masses = None if enc.masses is None else enc.masses[keep]
    return UltrametricEncoding(depths, enc.horizon, masses, enc.unit)
