"""k-spine trees, the many-to-few bias Delta_k and exact many-to-few oracles.

A k-spine tree at horizon n is an ultrametric tree with k leaves, coded by the
depths H_1..H_{k-1} of the most recent common ancestors of consecutive leaves.
A branch point u at generation |u| with d_u children carries the factor

    (1 / (p_{n-|u|} mu_{|u|})^(d_u - 1)) (1 / d_u!) f^(d_u)_{|u|+1}(1) / f'_{|u|+1}(1)^(d_u)

and Delta_k = k! mu_n^k times the product over branch points.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from bpve.env.environment import ResolvedEnvironment
from bpve.env.profile import build_profile
from bpve.errors import AbsoluteContinuityError, DomainError, EnumerationLimitError

ENUMERATION_LIMIT = 10**6


@dataclass
class SpineNode:
    """Internal node at wall height ``height`` (generation n - height)."""

    height: int
    children: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class SpineTree:
    """k-leaf tree with its depth encoding and branch points (generation, out-degree)."""

    k: int
    depths: tuple
    horizon: int
    branch_points: tuple
    root: object

    def encode(self) -> tuple:
        """Depth sequence read off the explicit tree by a left-to-right traversal."""
        out: list[int] = []

        def walk(node):
            if isinstance(node, int):
                return
            for c, child in enumerate(node.children):
                if c > 0:
                    out.append(node.height)
                walk(child)

        walk(self.root)
        return tuple(out)

    def leaf_distance(self, i: int, j: int) -> int:
        """Distance between leaves i and j through the explicit tree (height of their MRCA)."""
        if i == j:
            return 0
        path_i = self._path(i)
        path_j = self._path(j)
        common = None
        for a, b in zip(path_i, path_j):
            if a is b:
                common = a
            else:
                break
        return common.height

    def _path(self, leaf: int) -> list:
        def search(node, trail):
            if isinstance(node, int):
                return trail if node == leaf else None
            for child in node.children:
                found = search(child, trail + [node])
                if found is not None:
                    return found
            return None

        path = search(self.root, [])
        if path is None:
            raise IndexError(f"leaf {leaf} not in tree")
        return path


def build_tree_from_depths(depths: Sequence[int], n: int) -> SpineTree:
    """Invert the depth encoding by a stack scan.

    Leaves are read left to right. A wall h closes every open node lower than h;
    an open node of height exactly h absorbs the next block (ties form one node of
    higher out-degree); otherwise a new node of height h is opened.
    """
    depths = tuple(int(h) for h in depths)
    if any(h < 1 or h > n for h in depths):
        raise DomainError(f"depths must lie in 1..{n}")
    k = len(depths) + 1
    stack: list[SpineNode] = []
    last: object = 0
    for leaf, h in enumerate(depths, start=1):
        while stack and stack[-1].height < h:
            top = stack.pop()
            top.children.append(last)
            last = top
        if stack and stack[-1].height == h:
            stack[-1].children.append(last)
        else:
            stack.append(SpineNode(h, [last]))
        last = leaf
    while stack:
        top = stack.pop()
        top.children.append(last)
        last = top
    branch = []

    def collect(node):
        if isinstance(node, int):
            return
        branch.append((n - node.height, len(node.children)))
        for child in node.children:
            collect(child)

    collect(last)
    branch.sort()
    return SpineTree(k, depths, int(n), tuple(branch), last)


def branch_points(depths: Sequence[int], n: int) -> tuple:
    return build_tree_from_depths(depths, n).branch_points


# --------------------------------------------------------------------- bias
def _mu(env: ResolvedEnvironment, n: int) -> np.ndarray:
    means = env.restricted(n).means()
    return np.concatenate(([1.0], np.cumprod(means)))


def bias_delta(tree: SpineTree, env: ResolvedEnvironment, p: Sequence[float],
               mu: np.ndarray | None = None) -> float:
    """Delta_k of a k-spine tree for depth law ``p`` (p[h-1] = probability of depth h)."""
    n = tree.horizon
    p = np.asarray(p, dtype=float)
    if p.size != n:
        raise DomainError(f"depth law must have {n} entries")
    mu = _mu(env, n) if mu is None else mu
    value = math.factorial(tree.k) * mu[n] ** tree.k
    for gen, d in tree.branch_points:
        h = n - gen
        if p[h - 1] <= 0:
            raise AbsoluteContinuityError(f"depth law vanishes at depth {h}, used by a branch point")
        law = env.law(gen + 1)
        m = law.mean
        value *= (law.factorial_moment(d) / (math.factorial(d) * m ** d)
                  / (p[h - 1] * mu[gen]) ** (d - 1))
    return float(value)


def depth_law(env: ResolvedEnvironment, n: int, kind) -> np.ndarray:
    """Depth law on {1..n}: 'uniform', 'profile_p_bar' (the spine depth law), or explicit weights."""
    if isinstance(kind, str):
        if kind == "uniform":
            return np.full(n, 1.0 / n)
        if kind == "profile_p_bar":
            # p_bar does not depend on kappa, so any positive value works
            return np.array(build_profile(env.restricted(n), n, 1.0, kappa=1.0).p_bar)
        raise DomainError(f"unknown depth law {kind!r}")
    p = np.asarray(kind, dtype=float)
    if p.size != n or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise DomainError("explicit depth law must be a probability vector of length n")
    return p


def _depth_matrix(depths: Sequence[int]) -> np.ndarray:
    k = len(depths) + 1
    mat = np.zeros((k, k))
    for i in range(k):
        run = 0
        for j in range(i + 1, k):
            run = max(run, depths[j - 1])
            mat[i, j] = mat[j, i] = run
    return mat


def _branching_possible(env: ResolvedEnvironment, n: int) -> np.ndarray:
    """mask[h-1] is True when a branch point at depth h has positive weight."""
    out = np.zeros(n, dtype=bool)
    for h in range(1, n + 1):
        out[h - 1] = env.law(n - h + 1).factorial_moment(2) > 0
    return out


@dataclass
class ManyToFewEstimate:
    estimate: float
    stderr: float
    reps: int
    flagged: bool = False
    message: str = ""

    def __iter__(self):
        yield self.estimate
        yield self.stderr


def many_to_few_estimate(env: ResolvedEnvironment, n: int, k: int, phi: Callable[[np.ndarray], float],
                         reps: int, rng: np.random.Generator, depth_law_kind="uniform",
                         average_permutations: bool = False) -> ManyToFewEstimate:
    """Monte Carlo estimate of E[sum over distinct k-tuples of generation n of phi(distances)].

    Each replicate draws k - 1 i.i.d. depths from the depth law, builds the
    k-spine tree, and scores Delta_k * phi(H_{sigma_i, sigma_j}) for an independent
    uniform relabelling sigma (or the average over all relabellings). Pass a
    truncated environment to estimate the moments of the truncated process.
    """
    if reps < 1:
        raise DomainError("reps must be >= 1")
    if k < 1:
        raise DomainError("k must be >= 1")
    p = depth_law(env, n, depth_law_kind)
    mu = _mu(env, n)
    flagged = bool(np.any((p <= 0) & _branching_possible(env, n))) and k > 1
    message = ("depth law vanishes at depths where branch points have positive weight; "
               "the estimator is biased") if flagged else ""
    if k == 1:
        val = mu[n] * float(phi(np.zeros((1, 1))))
        return ManyToFewEstimate(val, 0.0, reps, flagged, message)
    depths = rng.choice(n, size=(reps, k - 1), p=p) + 1
    perms = list(itertools.permutations(range(k)))
    perm_idx = rng.integers(0, len(perms), size=reps)
    key_rows, inverse = np.unique(depths, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    scores = np.empty(reps)
    cache: dict = {}
    for r_key, row in enumerate(key_rows):
        tree = build_tree_from_depths(row, n)
        delta = bias_delta(tree, env, p, mu)
        mat = _depth_matrix(tuple(row))
        sel = np.flatnonzero(inverse == r_key)
        if average_permutations:
            val = np.mean([phi(mat[np.ix_(q, q)]) for q in perms])
            scores[sel] = delta * val
            continue
        for q_idx in np.unique(perm_idx[sel]):
            key = (r_key, int(q_idx))
            if key not in cache:
                q = perms[q_idx]
                cache[key] = delta * float(phi(mat[np.ix_(q, q)]))
            scores[sel[perm_idx[sel] == q_idx]] = cache[key]
    est = float(scores.mean())
    se = float(scores.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan")
    return ManyToFewEstimate(est, se, reps, flagged, message)


# ------------------------------------------------------------ exact oracle
@dataclass
class ExactComparison:
    lhs: float
    rhs: float
    trees: int

    @property
    def difference(self) -> float:
        return abs(self.lhs - self.rhs)

    def to_json(self) -> str:
        d = asdict(self)
        d["difference"] = self.difference
        return json.dumps(d)


def _children_walls(walls: tuple, kids: tuple) -> tuple:
    """Walls of the next generation given current walls and per-individual child counts."""
    out = []
    prev_parent = None
    for parent, c in enumerate(kids):
        for child in range(c):
            if prev_parent is not None:
                if child > 0:
                    out.append(1)
                else:
                    out.append(1 + max(walls[prev_parent:parent]))
            prev_parent = parent
    return tuple(out)


def enumerate_generation_law(env: ResolvedEnvironment, n: int,
                             limit: int = ENUMERATION_LIMIT) -> dict:
    """Exact law of the wall sequence at generation n over all trees.

    Returns {walls: probability}; a surviving population of size z has z - 1
    walls and extinction is the key None.
    """
    states: dict = {(): 1.0}
    visited = 0
    for gen in range(1, n + 1):
        law = env.law(gen)
        support = np.flatnonzero(law.weights)
        new: dict = {}
        for walls, prob in states.items():
            if walls is None:
                new[None] = new.get(None, 0.0) + prob
                continue
            z = len(walls) + 1
            visited += len(support) ** z
            if visited > limit:
                raise EnumerationLimitError(f"more than {limit} offspring configurations; "
                                            "reduce the horizon or the support")
            for kids in itertools.product(support, repeat=z):
                w = prob * float(np.prod(law.weights[list(kids)]))
                if w == 0.0:
                    continue
                key = _children_walls(walls, kids) if sum(kids) > 0 else None
                new[key] = new.get(key, 0.0) + w
        states = new
    return states


def enumerate_exact(env: ResolvedEnvironment, n: int, k: int, phi: Callable[[np.ndarray], float],
                    depth_law_kind="uniform", limit: int = ENUMERATION_LIMIT) -> ExactComparison:
    """Both sides of the many-to-few identity as exact finite sums.

    lhs: sum over all trees of P(tree) times the sum over ordered distinct
    k-tuples of generation-n individuals of phi(distance matrix).
    rhs: sum over depth vectors h in {1..n}^(k-1) of prod p_{h_i} times
    Delta_k(h) times the average of phi over leaf relabellings.
    """
    if n < 1 or k < 1:
        raise DomainError("n and k must be >= 1")
    if n ** max(k - 1, 0) > limit:
        raise EnumerationLimitError("too many depth vectors")
    states = enumerate_generation_law(env, n, limit)
    lhs = 0.0
    for walls, prob in states.items():
        if walls is None:
            continue
        z = len(walls) + 1
        if z < k:
            continue
        total = 0.0
        for tup in itertools.permutations(range(z), k):
            mat = np.zeros((k, k))
            for a in range(k):
                for b in range(a + 1, k):
                    lo, hi = sorted((tup[a], tup[b]))
                    mat[a, b] = mat[b, a] = max(walls[lo:hi])
            total += float(phi(mat))
        lhs += prob * total
    p = depth_law(env, n, depth_law_kind)
    mu = _mu(env, n)
    perms = list(itertools.permutations(range(k)))
    rhs = 0.0
    for h in itertools.product(range(1, n + 1), repeat=k - 1):
        weight = float(np.prod([p[x - 1] for x in h]))
        if weight == 0.0:
            continue
        tree = build_tree_from_depths(h, n)
        mat = _depth_matrix(h)
        val = np.mean([phi(mat[np.ix_(q, q)]) for q in perms])
        rhs += weight * bias_delta(tree, env, p, mu) * val
    return ExactComparison(float(lhs), float(rhs), len(states))
