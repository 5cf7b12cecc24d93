"""Environment families and their resolution into per-generation offspring laws."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from bpve.env.laws import DEFAULT_TAIL_MASS, OffspringLaw
from bpve.env.limit import KappaRule, LimitProfile
from bpve.errors import DegenerateEnvironmentError, DomainError

FAMILIES = ("constant-GW", "iid-random-environment", "variance-burst", "explicit-list")
LAW_FAMILIES = ("linear_fractional", "negative_binomial")


@dataclass(frozen=True, eq=False)
class ResolvedEnvironment:
    """A concrete sequence of offspring laws f_1, ..., f_n.

    Stored run-length encoded: ``runs`` is a sequence of (law index, length)
    pairs, so long stretches of a constant law cost O(1) memory. Generation k
    (1-based) reproduces with the law of the run that covers k.
    """

    laws: tuple
    runs: tuple
    N: int = 0
    kappa_rule: KappaRule | None = None
    description: str = ""

    def __post_init__(self):
        runs = tuple((int(i), int(r)) for i, r in self.runs if int(r) > 0)
        for i, _ in runs:
            if not 0 <= i < len(self.laws):
                raise DomainError("run refers to an unknown law")
        object.__setattr__(self, "runs", runs)
        object.__setattr__(self, "laws", tuple(self.laws))

    @classmethod
    def from_laws(cls, laws: Sequence[OffspringLaw], N: int = 0,
                  kappa_rule: KappaRule | None = None) -> "ResolvedEnvironment":
        return cls(tuple(laws), tuple((i, 1) for i in range(len(laws))), N, kappa_rule)

    @classmethod
    def constant(cls, law: OffspringLaw, n: int, N: int = 0,
                 kappa_rule: KappaRule | None = None) -> "ResolvedEnvironment":
        return cls((law,), ((0, n),), N, kappa_rule)

    @property
    def horizon(self) -> int:
        return sum(r for _, r in self.runs)

    def run_bounds(self) -> np.ndarray:
        """Start generation (1-based) of each run, plus one past the end."""
        lengths = np.array([r for _, r in self.runs], dtype=np.int64)
        return np.concatenate(([1], 1 + np.cumsum(lengths)))

    def law_index(self) -> np.ndarray:
        """Per-generation law index, entry k-1 for generation k."""
        if not self.runs:
            return np.zeros(0, dtype=np.int64)
        ids = np.array([i for i, _ in self.runs], dtype=np.int64)
        lengths = np.array([r for _, r in self.runs], dtype=np.int64)
        return np.repeat(ids, lengths)

    def law(self, k: int) -> OffspringLaw:
        if not 1 <= k <= self.horizon:
            raise DomainError(f"generation {k} outside 1..{self.horizon}")
        bounds = self.run_bounds()
        r = int(np.searchsorted(bounds, k, side="right") - 1)
        return self.laws[self.runs[r][0]]

    def per_generation(self, attr: str) -> np.ndarray:
        """Evaluate a scalar law statistic per generation ('mean' or 'f2')."""
        values = np.array([self._law_stat(law, attr) for law in self.laws])
        return values[self.law_index()]

    @staticmethod
    def _law_stat(law: OffspringLaw, attr: str) -> float:
        if attr == "mean":
            return law.mean
        if attr == "f2":
            return law.factorial_moment(2)
        raise DomainError(f"unknown statistic {attr!r}")

    def means(self) -> np.ndarray:
        return self.per_generation("mean")

    def second_factorial_moments(self) -> np.ndarray:
        return self.per_generation("f2")

    def restricted(self, n: int) -> "ResolvedEnvironment":
        """First n generations."""
        if n > self.horizon:
            raise DomainError(f"environment covers only {self.horizon} generations")
        runs, left = [], n
        for i, r in self.runs:
            if left <= 0:
                break
            runs.append((i, min(r, left)))
            left -= r
        return ResolvedEnvironment(self.laws, tuple(runs), self.N, self.kappa_rule, self.description)

    def truncated(self, beta: int) -> "ResolvedEnvironment":
        """Environment of the truncated offspring numbers min(xi, beta)."""
        laws = tuple(law.truncated(beta) for law in self.laws)
        return ResolvedEnvironment(laws, self.runs, self.N, self.kappa_rule,
                                   f"{self.description} truncated at {beta}".strip())

    def max_folded_tail(self) -> float:
        return max((law.folded_tail for law in self.laws), default=0.0)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Declarative description of an environment family at every scale N.

    Families
    --------
    constant-GW
        f_k has mean 1 + alpha/N and f''_k(1) = sigma2 for all k.
    iid-random-environment
        f_k has mean 1 + alpha/N + zeta_k/sqrt(N), zeta_k i.i.d. with mean zero and
        standard deviation ``zeta_scale``, and f''_k(1) = sigma2. The zeta sequence
        is drawn from (seed, N) before anything else, so the environment is frozen.
    variance-burst
        Outside the window, mean 1 + alpha/N and f''(1) = sigma2. For generations
        floor(window N) + 1, ..., floor(window N) + round(N^(1-p)) the offspring
        number equals round(N^p) with probability 1/round(N^p) and 0 otherwise.
    explicit-list
        ``laws`` lists the per-generation weight arrays; independent of N.
    """

    family: str = "constant-GW"
    alpha: float = 0.0
    sigma2: float = 2.0
    law_family: str = "linear_fractional"
    burst_p: float = 0.25
    burst_window: float = 0.5
    zeta_scale: float = 1.0
    zeta_dist: str = "rademacher"
    laws: tuple = ()
    seed: int = 0
    kappa_rule: Any = None
    limit: Mapping | None = None
    tail_mass: float = DEFAULT_TAIL_MASS
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown environment family {self.family!r}; expected one of {FAMILIES}")
        if self.law_family not in LAW_FAMILIES:
            raise DomainError(f"unknown law family {self.law_family!r}")
        if self.family == "variance-burst" and not 0 < self.burst_p < 1:
            raise DomainError("burst exponent p must lie in (0, 1)")
        if self.zeta_dist not in ("rademacher", "normal"):
            raise DomainError("zeta_dist must be 'rademacher' or 'normal'")
        laws = tuple(tuple(float(x) for x in w) for w in self.laws)
        object.__setattr__(self, "laws", laws)

    # --------------------------------------------------------------- config I/O
    @classmethod
    def from_config(cls, cfg: Mapping) -> "EnvironmentSpec":
        cfg = dict(cfg)
        known = {"family", "alpha", "sigma2", "law", "law_family", "burst", "zeta", "laws",
                 "seed", "kappa_rule", "kappa", "limit", "tail_mass"}
        unknown = set(cfg) - known
        if unknown:
            raise DomainError(f"unknown environment keys: {sorted(unknown)}")
        burst = cfg.get("burst") or {}
        zeta = cfg.get("zeta") or {}
        return cls(
            family=cfg.get("family", "constant-GW"),
            alpha=float(cfg.get("alpha", 0.0)),
            sigma2=float(cfg.get("sigma2", 2.0)),
            law_family=cfg.get("law_family", cfg.get("law", "linear_fractional")),
            burst_p=float(burst.get("p", 0.25)),
            burst_window=float(burst.get("window", 0.5)),
            zeta_scale=float(zeta.get("scale", 1.0)),
            zeta_dist=zeta.get("dist", "rademacher"),
            laws=tuple(tuple(w) for w in cfg.get("laws", ())),
            seed=int(cfg.get("seed", 0)),
            kappa_rule=cfg.get("kappa_rule", cfg.get("kappa")),
            limit=cfg.get("limit"),
            tail_mass=float(cfg.get("tail_mass", DEFAULT_TAIL_MASS)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "EnvironmentSpec":
        return cls.from_config(load_config_tree(path))

    def to_config(self) -> dict:
        out = {"family": self.family, "alpha": self.alpha, "sigma2": self.sigma2,
               "law_family": self.law_family, "seed": self.seed, "tail_mass": self.tail_mass}
        if self.family == "variance-burst":
            out["burst"] = {"p": self.burst_p, "window": self.burst_window}
        if self.family == "iid-random-environment":
            out["zeta"] = {"scale": self.zeta_scale, "dist": self.zeta_dist}
        if self.family == "explicit-list":
            out["laws"] = [list(w) for w in self.laws]
        if self.kappa_rule is not None:
            out["kappa_rule"] = self.kappa_rule
        if self.limit is not None:
            out["limit"] = dict(self.limit)
        return out

    # --------------------------------------------------------------- resolution
    def _law(self, mean: float, f2: float) -> OffspringLaw:
        if mean <= 0:
            raise DegenerateEnvironmentError(f"generation mean {mean} is not positive")
        if self.law_family == "linear_fractional":
            return OffspringLaw.linear_fractional(mean, f2, self.tail_mass)
        return OffspringLaw.negative_binomial(mean, f2, self.tail_mass)

    def burst_geometry(self, N: int) -> tuple[int, int, int]:
        """(first burst generation, number of burst generations, burst size) at scale N."""
        size = int(round(N ** self.burst_p))
        length = int(round(N ** (1.0 - self.burst_p)))
        first = int(np.floor(self.burst_window * N)) + 1
        return first, length, size

    def resolve(self, N: int, n: int | None = None) -> ResolvedEnvironment:
        """Offspring laws of generations 1..n at scale N (n defaults to N)."""
        N = int(N)
        if N < 1:
            raise DomainError("scale N must be >= 1")
        n = N if n is None else int(n)
        if n < 0:
            raise DomainError("horizon must be >= 0")
        kappa = self.declared_kappa()
        if self.family == "constant-GW":
            law = self._law(1.0 + self.alpha / N, self.sigma2)
            return ResolvedEnvironment((law,), ((0, n),), N, kappa, f"constant-GW N={N}")
        if self.family == "iid-random-environment":
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, N]))
            # zeta for generations 1..max(n, N) so that the first n laws do not depend on n
            m = max(n, N)
            if self.zeta_dist == "rademacher":
                zeta = self.zeta_scale * rng.choice(np.array([-1.0, 1.0]), size=m)
            else:
                zeta = self.zeta_scale * rng.standard_normal(m)
            means = 1.0 + self.alpha / N + zeta[:n] / np.sqrt(N)
            if self.zeta_dist == "rademacher":
                distinct = {}
                laws, runs = [], []
                for mval in means:
                    key = float(mval)
                    if key not in distinct:
                        distinct[key] = len(laws)
                        laws.append(self._law(key, self.sigma2))
                    runs.append((distinct[key], 1))
            else:
                laws = [self._law(float(mv), self.sigma2) for mv in means]
                runs = [(i, 1) for i in range(n)]
            return ResolvedEnvironment(tuple(laws), tuple(runs), N, kappa, f"iid N={N} seed={self.seed}")
        if self.family == "variance-burst":
            background = self._law(1.0 + self.alpha / N, self.sigma2)
            first, length, size = self.burst_geometry(N)
            burst = OffspringLaw.burst(size)
            runs = []
            before = min(first - 1, n)
            runs.append((0, before))
            inside = max(0, min(first + length - 1, n) - before)
            runs.append((1, inside))
            runs.append((0, max(0, n - before - inside)))
            return ResolvedEnvironment((background, burst), tuple(runs), N, kappa,
                                       f"variance-burst N={N} p={self.burst_p}")
        # explicit list
        if n > len(self.laws):
            raise DomainError(f"explicit list has {len(self.laws)} laws, horizon {n} requested")
        laws = [OffspringLaw(np.asarray(w)) for w in self.laws[:n]]
        return ResolvedEnvironment.from_laws(laws, N, kappa)

    # ------------------------------------------------------------ limit profile
    def declared_kappa(self) -> KappaRule | None:
        """kappa rule from the config or a declared/built-in profile (None if implicit)."""
        if self.kappa_rule is not None:
            return KappaRule.from_config(self.kappa_rule)
        profile = self.limit_profile()
        return profile.kappa if profile is not None else None

    def limit_profile(self) -> LimitProfile | None:
        """Declared limit (X, sigma2, kappa), or the built-in one for the family.

        For the iid family only the deterministic part is returned: X_t is the drift
        (alpha - Var(zeta)/2) t that the quenched log-mean path fluctuates around,
        and sigma2(t) = sigma2 t with kappa_N = N.
        """
        if self.limit is not None:
            cfg = dict(self.limit)
            if self.kappa_rule is not None and "kappa" not in cfg:
                cfg["kappa"] = self.kappa_rule
            return LimitProfile.from_config(cfg)
        kappa = KappaRule.from_config(self.kappa_rule)
        if self.family == "constant-GW":
            return LimitProfile.linear(self.alpha, self.sigma2, kappa=kappa)
        if self.family == "iid-random-environment":
            return LimitProfile.linear(self.alpha - 0.5 * self.zeta_scale ** 2, self.sigma2, kappa=kappa)
        if self.family == "variance-burst":
            return LimitProfile.linear(self.alpha, self.sigma2, s2_jumps=[(self.burst_window, 1.0)],
                                       kappa=kappa)
        return None

    def kappa(self, N: int, t: float = 1.0, env: ResolvedEnvironment | None = None) -> float:
        """kappa_N: declared rule if any, else sum of f''_k(1) over k <= tN."""
        rule = self.declared_kappa()
        if rule is not None:
            return rule(N)
        env = env if env is not None else self.resolve(N, int(np.floor(t * N)))
        return implicit_kappa(env, int(np.floor(t * N)))


def implicit_kappa(env: ResolvedEnvironment, n: int) -> float:
    """sum_{k <= n} f''_k(1) / sigma2_ref with sigma2_ref = 1."""
    total = 0.0
    left = n
    for i, r in env.runs:
        take = min(r, left)
        total += take * env.laws[i].factorial_moment(2)
        left -= take
        if left <= 0:
            break
    return float(total)


def load_config_tree(path: str | Path) -> dict:
    """Read a YAML or JSON configuration file into a dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    import yaml

    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise DomainError(f"configuration {path} does not contain a mapping")
    return data
