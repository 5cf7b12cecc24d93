"""Forward simulation of branching processes in varying environment.

Generations are numbered 0..n with Z_0 = 1; generation k reproduces with the
law ``env.law(k)`` of a :class:`~bpve.env.ResolvedEnvironment`. Individuals of a
generation are stored in planar (lexicographic) order, so a generation is fully
described by the array of its individuals' parent indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from bpve.alias import AliasTable
from bpve.env.environment import ResolvedEnvironment
from bpve.errors import DegenerateEnvironmentError, DomainError, ResourceLimitError, StructuralError
from bpve.ultrametric import UltrametricEncoding

DEFAULT_CAP = 10**8
# wall value separating two replicates stored side by side
SENTINEL = 2**30


@dataclass(frozen=True, eq=False)
class SimOutcome:
    """One simulated tree: sizes Z_0..Z_n and optional genealogy data."""

    sizes: np.ndarray
    genealogy: UltrametricEncoding | None = None
    reduced: np.ndarray | None = None

    @property
    def survived(self) -> bool:
        return bool(self.sizes[-1] > 0)


@dataclass(frozen=True, eq=False)
class SpineOutcome:
    """One tree under the spinal measure.

    ``spine_leaf_index`` is the 0-based planar position of the marked individual
    among the Z_n individuals of the last generation.
    """

    sizes: np.ndarray
    spine_leaf_index: int

    @property
    def spine_is_leftmost(self) -> bool:
        return self.spine_leaf_index == 0


@dataclass(frozen=True, eq=False)
class SpineBatch:
    """Vectorised spine simulation: final sizes and spine positions per replicate."""

    final_sizes: np.ndarray
    spine_leaf_index: np.ndarray
    sizes: np.ndarray | None = None

    @property
    def spine_is_leftmost(self) -> np.ndarray:
        return self.spine_leaf_index == 0


@dataclass(frozen=True, eq=False)
class ConditionedBatch:
    """Trees conditioned on Z_n > 0, one row per replicate.

    ``reduced[r, c]`` is Z_{g, n} for g = ``record_generations[c]``, the number of
    generation-g individuals with descendants at n; ``final_sizes`` is Z_n.
    ``samples[r]`` holds the distance matrix of ``sample_size`` distinct leaves
    drawn uniformly (NaN rows when Z_n is smaller than the sample size).
    ``first_family[r]`` is the number of generation-n descendants of the leftmost
    generation-g individual with descendants at n, g = ``family_generation``.
    """

    horizon: int
    final_sizes: np.ndarray
    record_generations: np.ndarray
    reduced: np.ndarray
    encodings: list | None = None
    samples: np.ndarray | None = None
    sample_size: int = 0
    family_generation: int | None = None
    first_family: np.ndarray | None = None


# ----------------------------------------------------------------- helpers
def _check_horizon(env: ResolvedEnvironment, n: int) -> None:
    if n < 1:
        raise DomainError("horizon must be at least 1")
    if env.horizon < n:
        raise DomainError(f"environment covers {env.horizon} generations, horizon is {n}")


class _LawSamplers:
    """Alias tables built once per distinct law of an environment."""

    def __init__(self, env: ResolvedEnvironment, n: int):
        self.env = env
        self.law_index = env.restricted(n).law_index()
        self._tables: dict[int, AliasTable] = {}

    def table(self, k: int) -> AliasTable:
        idx = int(self.law_index[k - 1])
        tab = self._tables.get(idx)
        if tab is None:
            tab = AliasTable(self.env.laws[idx].weights)
            self._tables[idx] = tab
        return tab


def sum_iid(table: AliasTable, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each entry c of ``counts``, the sum of c i.i.d. draws from ``table``."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(counts.shape, dtype=np.int64)
    draws = table.sample(rng, total)
    cum = np.concatenate(([0], np.cumsum(draws)))
    ends = np.cumsum(counts)
    return cum[ends] - cum[ends - counts]


# ------------------------------------------------------------- unconditioned
def simulate_population(env: ResolvedEnvironment, n: int, rng: np.random.Generator,
                        keep_genealogy: bool = False, keep_reduced: bool = False,
                        cap: int = DEFAULT_CAP) -> SimOutcome:
    """Simulate Z_0..Z_n of one tree; optionally its genealogy at generation n.

    Parent arrays are stored only when the genealogy or the reduced counts are
    requested.
    """
    _check_horizon(env, n)
    samplers = _LawSamplers(env, n)
    sizes = np.zeros(n + 1, dtype=np.int64)
    sizes[0] = 1
    keep_parents = keep_genealogy or keep_reduced
    parents: list[np.ndarray] = []
    z = 1
    for k in range(1, n + 1):
        if z == 0:
            break
        kids = samplers.table(k).sample(rng, z)
        z = int(kids.sum())
        if z > cap:
            raise ResourceLimitError(f"generation {k} has {z} individuals, above the cap {cap}")
        sizes[k] = z
        if keep_parents:
            parents.append(np.repeat(np.arange(kids.size, dtype=np.int64), kids))
    genealogy = reduced = None
    if keep_parents and sizes[n] > 0:
        if keep_genealogy:
            genealogy = extract_genealogy(parents, n)
        if keep_reduced:
            reduced = reduced_from_parents(parents, n)
    elif keep_reduced:
        reduced = np.zeros(n + 1, dtype=np.int64)
    return SimOutcome(sizes, genealogy, reduced)


def _validate_parents(parent_arrays: Sequence[np.ndarray], n: int) -> list[np.ndarray]:
    if len(parent_arrays) != n:
        raise StructuralError(f"expected {n} parent arrays, got {len(parent_arrays)}")
    out = []
    prev = 1
    for k, p in enumerate(parent_arrays, start=1):
        p = np.asarray(p, dtype=np.int64)
        if p.size and (p[0] < 0 or p[-1] >= prev or np.any(np.diff(p) < 0)):
            raise StructuralError(
                f"generation {k}: parent indices must be nondecreasing and within 0..{prev - 1}")
        out.append(p)
        prev = p.size
    return out


def extract_genealogy(parent_arrays: Sequence[np.ndarray], n: int) -> UltrametricEncoding:
    """ℋ encoding of generation n from per-generation parent index arrays.

    ``parent_arrays[k-1][i]`` is the index, in generation k-1, of the parent of the
    i-th individual of generation k. Walls between consecutive individuals are
    carried forward: siblings are separated by 1, and two consecutive children of
    different parents P < P' by one plus the largest wall between P and P'.
    """
    parents = _validate_parents(parent_arrays, n)
    if parents[-1].size == 0:
        raise StructuralError("generation n is empty: no genealogy to encode")
    walls = np.zeros(0, dtype=np.int64)  # generation 0 has one individual, no walls
    for p in parents:
        if p.size == 0:
            raise StructuralError("an intermediate generation is empty")
        new = np.ones(p.size - 1, dtype=np.int64)
        step = np.flatnonzero(np.diff(p) > 0)
        if step.size:
            lo, hi = p[step], p[step + 1]
            # max over walls[lo:hi] for each consecutive parent pair
            pairs = np.empty(2 * step.size, dtype=np.int64)
            pairs[0::2], pairs[1::2] = lo, hi
            padded = np.concatenate((walls, [0]))
            new[step] = 1 + np.maximum.reduceat(padded, pairs)[0::2]
        walls = new
    return UltrametricEncoding(walls, n)


def reduced_from_parents(parent_arrays: Sequence[np.ndarray], n: int) -> np.ndarray:
    """Z_{i,n} for i = 0..n: distinct generation-i ancestors of generation n."""
    parents = _validate_parents(parent_arrays, n)
    out = np.zeros(n + 1, dtype=np.int64)
    current = np.arange(parents[-1].size, dtype=np.int64)
    out[n] = current.size
    for i in range(n, 0, -1):
        current = np.unique(parents[i - 1][current])
        out[i - 1] = current.size
    return out


def ancestor_walk_distance(parent_arrays: Sequence[np.ndarray], n: int, a: int, b: int) -> int:
    """n minus the generation of the MRCA of leaves a and b, by walking both lineages up."""
    if a == b:
        return 0
    gen = n
    while a != b:
        a = int(parent_arrays[gen - 1][a])
        b = int(parent_arrays[gen - 1][b])
        gen -= 1
    return n - gen


def simulate_sizes(env: ResolvedEnvironment, n: int, reps: int, rng: np.random.Generator,
                   record_all: bool = False, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Z_n for ``reps`` independent trees (the full (reps, n+1) table if ``record_all``)."""
    _check_horizon(env, n)
    samplers = _LawSamplers(env, n)
    z = np.ones(reps, dtype=np.int64)
    table = np.zeros((reps, n + 1), dtype=np.int64) if record_all else None
    if record_all:
        table[:, 0] = 1
    for k in range(1, n + 1):
        alive = np.flatnonzero(z)
        if alive.size == 0:
            break
        z[alive] = sum_iid(samplers.table(k), z[alive], rng)
        if z.max() > cap:
            raise ResourceLimitError(f"generation {k} exceeds the population cap {cap}")
        if record_all:
            table[:, k] = z
    return table if record_all else z


def truncation_coupling(env: ResolvedEnvironment, beta: int, n: int, rng: np.random.Generator,
                        cap: int = DEFAULT_CAP):
    """A tree and its coupled truncated tree, where each parent keeps its first min(xi, beta) children.

    Returns ``(encoding, keep)``: the ℋ encoding of the full tree at generation n
    (or None if it died out) and the planar indices of its leaves that belong to
    the truncated tree.
    """
    _check_horizon(env, n)
    samplers = _LawSamplers(env, n)
    parents = []
    inside = np.ones(1, dtype=bool)
    for k in range(1, n + 1):
        z = inside.size
        if z == 0:
            return None, np.zeros(0, dtype=np.int64)
        kids = samplers.table(k).sample(rng, z)
        if kids.sum() > cap:
            raise ResourceLimitError(f"generation {k} exceeds the population cap {cap}")
        p = np.repeat(np.arange(z, dtype=np.int64), kids)
        first = np.concatenate(([0], np.cumsum(kids)))[:-1]
        rank = np.arange(p.size) - np.repeat(first, kids)
        inside = inside[p] & (rank < beta)
        parents.append(p)
    if inside.size == 0:
        return None, np.zeros(0, dtype=np.int64)
    return extract_genealogy(parents, n), np.flatnonzero(inside)


# ------------------------------------------------------------------- spine
def _spine_tables(env: ResolvedEnvironment, n: int):
    tables = {}
    law_index = env.restricted(n).law_index()
    for idx in np.unique(law_index):
        law = env.laws[int(idx)]
        if law.mean <= 0:
            k = int(np.flatnonzero(law_index == idx)[0]) + 1
            raise DegenerateEnvironmentError(f"generation {k} has f'(1) = 0: no spine")
        tables[int(idx)] = (AliasTable(law.weights), AliasTable(law.size_biased().weights))
    return law_index, tables


def simulate_spine_batch(env: ResolvedEnvironment, n: int, reps: int, rng: np.random.Generator,
                         record_all: bool = False, cap: int = DEFAULT_CAP) -> SpineBatch:
    """Trees under the spinal measure, vectorised over replicates.

    The marked individual has a size-biased number of children xi* and the next
    marked individual is uniform among them; every other individual reproduces
    with the unbiased law. Only the numbers of individuals left and right of the
    spine are tracked.
    """
    _check_horizon(env, n)
    law_index, tables = _spine_tables(env, n)
    left = np.zeros(reps, dtype=np.int64)
    right = np.zeros(reps, dtype=np.int64)
    sizes = np.zeros((reps, n + 1), dtype=np.int64) if record_all else None
    if record_all:
        sizes[:, 0] = 1
    for k in range(1, n + 1):
        plain, biased = tables[int(law_index[k - 1])]
        left_kids = sum_iid(plain, left, rng)
        right_kids = sum_iid(plain, right, rng)
        xi = biased.sample(rng, reps)
        j = np.floor(rng.random(reps) * xi).astype(np.int64)
        left = left_kids + j
        right = right_kids + (xi - 1 - j)
        if (left + right).max() + 1 > cap:
            raise ResourceLimitError(f"generation {k} exceeds the population cap {cap}")
        if record_all:
            sizes[:, k] = left + right + 1
    return SpineBatch(left + right + 1, left, sizes)


def simulate_spine(env: ResolvedEnvironment, n: int, rng: np.random.Generator) -> SpineOutcome:
    batch = simulate_spine_batch(env, n, 1, rng, record_all=True)
    return SpineOutcome(batch.sizes[0], int(batch.spine_leaf_index[0]))


# -------------------------------------------------------- exact survival
def survival_vector(env: ResolvedEnvironment, n: int) -> np.ndarray:
    """s[j] = P(Z_n > 0 | Z_j = 1) for j = 0..n.

    Uses s_{j-1} = s_j * (1 - f_j(1 - s_j)) / s_j written through the tail
    polynomial, which keeps full relative precision when s_j is tiny.
    """
    _check_horizon(env, n)
    law_index = env.restricted(n).law_index()
    s = np.zeros(n + 1)
    s[n] = 1.0
    for j in range(n, 0, -1):
        law = env.laws[int(law_index[j - 1])]
        s[j - 1] = s[j] * law.one_minus_pgf_ratio(1.0 - s[j])
    return s


def survival_probability_exact(env: ResolvedEnvironment, n: int, method: str = "pgf_iteration") -> float:
    """P(Z_n > 0), exactly up to floating point.

    ``pgf_iteration`` composes q = f_1(f_2(...f_n(0))) and returns 1 - q.
    ``shape_series`` evaluates 1/P = 1/mu_n + sum_{j<n} phi_{j+1}(q_{j+1}) / mu_j,
    where q_j = P(Z_n = 0 | Z_j = 1) comes from backward pgf iteration.
    """
    _check_horizon(env, n)
    law_index = env.restricted(n).law_index()
    laws = [env.laws[int(i)] for i in law_index]
    if any(law.weights[0] == 1.0 for law in laws):
        return 0.0
    if method == "pgf_iteration":
        q = 0.0
        for law in reversed(laws):
            q = law.pgf(q)
        return 1.0 - q
    if method == "shape_series":
        q = np.zeros(n + 1)
        for j in range(n, 0, -1):
            q[j - 1] = laws[j - 1].pgf(q[j])
        means = np.array([law.mean for law in laws])
        mu = np.concatenate(([1.0], np.cumprod(means)))
        total = 1.0 / mu[n]
        for j in range(n):
            total += laws[j].shape(q[j + 1]) / mu[j]
        return 1.0 / total
    raise DomainError(f"unknown method {method!r}")


def extinction_probability_exact(env: ResolvedEnvironment, n: int, method: str = "pgf_iteration") -> float:
    """Alias of :func:`survival_probability_exact`; returns P(Z_n > 0)."""
    return survival_probability_exact(env, n, method)


# ------------------------------------------------------ conditioned trees
def _conditioned_tables(env: ResolvedEnvironment, n: int, s: np.ndarray) -> list[AliasTable]:
    """Per generation k, the law of the number of children with descendants at n,
    given that the parent has some."""
    law_index = env.restricted(n).law_index()
    cache: dict[tuple[int, float], AliasTable] = {}
    tables = []
    for k in range(1, n + 1):
        key = (int(law_index[k - 1]), float(s[k]))
        tab = cache.get(key)
        if tab is None:
            w = env.laws[key[0]].thinned_survivors(key[1])
            w[0] = 0.0
            tab = AliasTable(w)
            cache[key] = tab
        tables.append(tab)
    return tables


def _leaf_distances(walls: np.ndarray, starts: np.ndarray, sizes: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Distance matrices of k distinct uniform leaves per replicate (NaN if fewer leaves)."""
    reps = sizes.size
    out = np.full((reps, k, k), np.nan)
    ok = np.flatnonzero(sizes >= k)
    if ok.size == 0:
        return out
    z = sizes[ok]
    picks = np.empty((ok.size, k), dtype=np.int64)
    for c in range(k):
        # uniform among the z - c positions not yet taken, mapped past taken ones
        x = np.floor(rng.random(ok.size) * (z - c)).astype(np.int64)
        taken = np.sort(picks[:, :c], axis=1)
        for col in range(c):
            x = x + (x >= taken[:, col])
        picks[:, c] = x
    padded = np.concatenate((walls, [0]))
    base = starts[ok]
    for a in range(k):
        out[ok, a, a] = 0.0
        for b in range(a + 1, k):
            lo = base + np.minimum(picks[:, a], picks[:, b])
            hi = base + np.maximum(picks[:, a], picks[:, b])
            pairs = np.empty(2 * ok.size, dtype=np.int64)
            pairs[0::2], pairs[1::2] = lo, hi
            d = np.maximum.reduceat(padded, pairs)[0::2].astype(float)
            out[ok, a, b] = d
            out[ok, b, a] = d
    return out


def simulate_conditioned(env: ResolvedEnvironment, n: int, reps: int, rng: np.random.Generator,
                         record_generations: Sequence[int] | None = None, keep_genealogy: bool = False,
                         sample_size: int = 0, family_generation: int | None = None,
                         method: str = "h_transform",
                         cap: int = DEFAULT_CAP) -> ConditionedBatch:
    """Independent trees conditioned on {Z_n > 0}.

    The default method samples the reduced tree directly: an individual of
    generation k-1 with descendants at n has a number of such children equal in
    law to a binomial thinning of f_k with keep probability P(Z_n > 0 | Z_k = 1),
    conditioned to be positive. Generation n of the reduced tree is generation n
    of the original tree, so Z_n, the reduced counts and the genealogy at n are
    exact. ``method="rejection"`` simulates full trees until they survive.
    """
    _check_horizon(env, n)
    if reps < 1:
        raise DomainError("reps must be >= 1")
    gens = np.arange(n + 1) if record_generations is None else np.asarray(record_generations, dtype=np.int64)
    if gens.size and (gens.min() < 0 or gens.max() > n):
        raise DomainError("recorded generations must lie in 0..n")
    if method == "rejection":
        return _conditioned_by_rejection(env, n, reps, rng, gens, keep_genealogy, sample_size,
                                         family_generation, cap)
    if method != "h_transform":
        raise DomainError(f"unknown method {method!r}")
    s = survival_vector(env, n)
    if s[0] <= 0.0:
        raise DegenerateEnvironmentError("P(Z_n > 0) = 0: cannot condition on survival")
    tables = _conditioned_tables(env, n, s)
    reduced = np.zeros((reps, gens.size), dtype=np.int64)
    col = {int(g): c for c, g in enumerate(gens)}
    offsets = np.arange(reps + 1, dtype=np.int64)  # individuals of replicate r: offsets[r]..offsets[r+1]-1
    walls = np.full(reps, SENTINEL, dtype=np.int64)
    if 0 in col:
        reduced[:, col[0]] = 1
    if family_generation is not None and not 0 <= family_generation <= n:
        raise DomainError("family generation must lie in 0..n")
    track_walls = keep_genealogy or sample_size > 0 or family_generation is not None
    for k in range(1, n + 1):
        kids = tables[k - 1].sample(rng, offsets[-1])
        cum = np.concatenate(([0], np.cumsum(kids)))
        if cum[-1] > cap:
            raise ResourceLimitError(f"generation {k} exceeds the population cap {cap}")
        if track_walls:
            new = np.ones(int(cum[-1]), dtype=np.int64)
            new[cum[1:] - 1] = np.where(walls >= SENTINEL, SENTINEL, walls + 1)
            walls = new
        offsets = cum[offsets]
        if k in col:
            reduced[:, col[k]] = np.diff(offsets)
    sizes = np.diff(offsets)
    encodings = None
    if keep_genealogy:
        encodings = [UltrametricEncoding(walls[offsets[r]:offsets[r + 1] - 1], n) for r in range(reps)]
    samples = _leaf_distances(walls, offsets[:-1], sizes, sample_size, rng) if sample_size > 0 else None
    first = None
    if family_generation is not None:
        # leaves share a generation-g ancestor iff the wall between them is <= n - g
        cuts = np.flatnonzero(walls > n - family_generation)
        ends = cuts[np.searchsorted(cuts, offsets[:-1])]
        first = ends - offsets[:-1] + 1
    return ConditionedBatch(n, sizes, gens, reduced, encodings, samples, sample_size,
                            family_generation, first)


def _conditioned_by_rejection(env, n, reps, rng, gens, keep_genealogy, sample_size, family_generation, cap):
    if survival_probability_exact(env, n) <= 0.0:
        raise DegenerateEnvironmentError("P(Z_n > 0) = 0: cannot condition on survival")
    sizes = np.zeros(reps, dtype=np.int64)
    reduced = np.zeros((reps, gens.size), dtype=np.int64)
    encodings = []
    samples = np.full((reps, sample_size, sample_size), np.nan) if sample_size > 0 else None
    first = np.zeros(reps, dtype=np.int64) if family_generation is not None else None
    r = 0
    while r < reps:
        out = simulate_population(env, n, rng, keep_genealogy=True, keep_reduced=True, cap=cap)
        if not out.survived:
            continue
        sizes[r] = out.sizes[-1]
        reduced[r] = out.reduced[gens]
        if keep_genealogy:
            encodings.append(out.genealogy)
        if sample_size > 0 and sizes[r] >= sample_size:
            leaves = rng.choice(int(sizes[r]), size=sample_size, replace=False)
            samples[r] = out.genealogy.distance_matrix(leaves)
        if first is not None:
            cuts = np.flatnonzero(out.genealogy.depths > n - family_generation)
            first[r] = (cuts[0] + 1) if cuts.size else sizes[r]
        r += 1
    return ConditionedBatch(n, sizes, gens, reduced, encodings if keep_genealogy else None,
                            samples, sample_size, family_generation, first)

