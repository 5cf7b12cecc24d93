"""Experiment drivers: simulate, compare with the limit laws, write report files.

Every experiment kind fills a StatReport with estimates and named comparisons
and returns the tables written as ``raw.csv`` (one row per replicate or case)
and ``plot_*.csv`` (binned data against theoretical curves).
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from bpve.cpp import (
    CppLaw,
    cpp_moment_exact,
    gamma_mixture_density,
    gw_split_time_density,
    make_cpp_law,
    mixture_cdf,
    pair_distance_cdf,
    pair_distance_jump,
    sample_cpp_ksample,
    survival_asymptotic,
    survivor_count_law,
    yule_increment_tail,
    yule_reduced_pmf,
)
from bpve.env import (
    EnvironmentSpec,
    LimitProfile,
    OffspringLaw,
    ResolvedEnvironment,
    build_profile,
    horizon_generations,
    validate_near_criticality,
)
from bpve.errors import DomainError, HypothesisViolationError, ResourceLimitError
from bpve.harness.config import Comparison, ExperimentConfig, StatReport
from bpve.harness.parallel import run_chunks
from bpve.harness.stats import chi_square, histogram_table, ks_lattice, ks_statistic, ks_two_sample
from bpve.kspine import enumerate_exact, many_to_few_estimate
from bpve.simulate import (
    DEFAULT_CAP,
    simulate_conditioned,
    simulate_population,
    simulate_sizes,
    survival_probability_exact,
)

_ENV_CACHE: dict = {}
_LAW_CACHE: dict = {}


# ------------------------------------------------------------- worker side
def _environment(spec_cfg: dict, N: int, n: int) -> ResolvedEnvironment:
    key = (json.dumps(spec_cfg, sort_keys=True, default=str), N, n)
    env = _ENV_CACHE.get(key)
    if env is None:
        if len(_ENV_CACHE) > 16:
            _ENV_CACHE.clear()
        env = EnvironmentSpec.from_config(spec_cfg).resolve(N, n)
        _ENV_CACHE[key] = env
    return env


def _cpp_law(profile_cfg: dict, t: float, require_increase: bool) -> CppLaw:
    key = (json.dumps(profile_cfg, sort_keys=True, default=str), t, require_increase)
    law = _LAW_CACHE.get(key)
    if law is None:
        law = make_cpp_law(LimitProfile.from_config(profile_cfg), t, require_increase)
        _LAW_CACHE[key] = law
    return law


def _blank(size: int, payload: dict) -> dict:
    return {
        "sizes": np.full(size, -1, dtype=np.int64),
        "reduced": np.full((size, len(payload["gens"])), -1, dtype=np.int64),
        "pair": np.full(size, np.nan),
        "family": np.full(size, -1, dtype=np.int64),
        "capped": np.zeros(size, dtype=bool),
        "genealogy": [None] * size,
    }


def _fill_conditioned(rec: dict, rows, env, payload, size, rng) -> None:
    n = payload["n"]
    batch = simulate_conditioned(env, n, size, rng, record_generations=payload["gens"],
                                 keep_genealogy=payload["dump"], sample_size=payload["sample_size"],
                                 family_generation=payload["family"], cap=payload["cap"])
    rec["sizes"][rows] = batch.final_sizes
    rec["reduced"][rows] = batch.reduced
    if batch.samples is not None:
        rec["pair"][rows] = batch.samples[:, 0, 1]
    if batch.first_family is not None:
        rec["family"][rows] = batch.first_family
    if batch.encodings is not None:
        for r, enc in zip(np.atleast_1d(np.arange(rec["sizes"].size)[rows]), batch.encodings):
            rec["genealogy"][r] = enc.depths


def _fill_unconditioned(rec: dict, i: int, env, payload, rng) -> None:
    n = payload["n"]
    out = simulate_population(env, n, rng, keep_genealogy=True, keep_reduced=True, cap=payload["cap"])
    z = int(out.sizes[-1])
    rec["sizes"][i] = z
    rec["reduced"][i] = out.reduced[payload["gens"]] if z > 0 else 0
    if z == 0:
        return
    enc = out.genealogy
    k = payload["sample_size"]
    if k >= 2 and z >= k:
        leaves = rng.choice(z, size=k, replace=False)
        rec["pair"][i] = enc.distance(int(leaves[0]), int(leaves[1]))
    if payload["family"] is not None:
        cuts = np.flatnonzero(enc.depths > n - payload["family"])
        rec["family"][i] = (cuts[0] + 1) if cuts.size else z
    if payload["dump"]:
        rec["genealogy"][i] = enc.depths


def _tree_worker(rng: np.random.Generator, size: int, payload: dict) -> dict:
    """Simulate ``size`` trees and record sizes, reduced counts, a pair distance and a family size."""
    env = _environment(payload["spec"], payload["N"], payload["n"])
    rec = _blank(size, payload)
    needs_tree = bool(payload["gens"]) or payload["sample_size"] > 0 or payload["family"] is not None \
        or payload["dump"]
    if payload["conditioned"]:
        try:
            _fill_conditioned(rec, slice(None), env, payload, size, rng)
        except ResourceLimitError:
            # redo replicate by replicate so that only the offending ones are lost
            rec = _blank(size, payload)
            for i, s in enumerate(rng.integers(0, 2**63 - 1, size=size)):
                try:
                    _fill_conditioned(rec, slice(i, i + 1), env, payload, 1, np.random.default_rng(s))
                except ResourceLimitError:
                    rec["capped"][i] = True
        return rec
    if not needs_tree:
        try:
            rec["sizes"][:] = simulate_sizes(env, payload["n"], size, rng, cap=payload["cap"])
            return rec
        except ResourceLimitError:
            for i, s in enumerate(rng.integers(0, 2**63 - 1, size=size)):
                try:
                    rec["sizes"][i] = simulate_sizes(env, payload["n"], 1, np.random.default_rng(s),
                                                     cap=payload["cap"])[0]
                except ResourceLimitError:
                    rec["capped"][i] = True
            return rec
    for i in range(size):
        try:
            _fill_unconditioned(rec, i, env, payload, rng)
        except ResourceLimitError:
            rec["capped"][i] = True
    return rec


def _cpp_worker(rng: np.random.Generator, size: int, payload: dict) -> dict:
    law = _cpp_law(payload["profile"], payload["t"], payload["require_increase"])
    z, mats = sample_cpp_ksample(law, payload["k"], rng, payload["method"], size=size)
    return {"z": np.asarray(z, dtype=float), "mats": mats}


# ------------------------------------------------------------ driver side
def _collect(chunks: list) -> dict:
    out = {}
    for key in chunks[0]:
        if isinstance(chunks[0][key], list):
            out[key] = [x for c in chunks for x in c[key]]
        else:
            out[key] = np.concatenate([c[key] for c in chunks])
    return out


def _simulate_trees(cfg: ExperimentConfig, spec: EnvironmentSpec, N: int, n: int, gens=(),
                    sample_size: int = 0, family=None, dump: bool = False) -> dict:
    payload = {"spec": spec.to_config(), "N": int(N), "n": int(n), "gens": [int(g) for g in gens],
               "sample_size": int(sample_size), "family": None if family is None else int(family),
               "conditioned": bool(cfg.conditioned), "dump": bool(dump),
               "cap": int(cfg.params.get("cap", DEFAULT_CAP))}
    chunks = run_chunks(_tree_worker, cfg.reps, (cfg.seed, int(N)), payload, cfg.parallelism, cfg.chunk_size)
    return _collect(chunks)


def _usable(rec: dict) -> np.ndarray:
    """Replicates that survived to the horizon without hitting the population cap."""
    return (rec["sizes"] > 0) & ~rec["capped"]


def _note_caps(report: StatReport, rec: dict, N: int) -> None:
    capped = int(rec["capped"].sum())
    if capped:
        report.notes.append(f"N={N}: {capped} replicates hit the population cap and were excluded")


def _alpha_level(cfg: ExperimentConfig) -> float:
    return float(cfg.params.get("alpha_level", 0.01))


def _gof_comparison(cfg: ExperimentConfig, name: str, source: str, stat: float, p: float,
                    tol_key: str, **details) -> Comparison:
    """Pass when the statistic is within ``params[tol_key]`` if set, else when p exceeds alpha_level."""
    tol = cfg.params.get(tol_key)
    if tol is not None:
        passed = stat <= float(tol)
    else:
        passed = p > _alpha_level(cfg)
    return Comparison(name, source, statistic=float(stat), p_value=float(p),
                      tolerance=None if tol is None else float(tol), passed=bool(passed), details=details)


def _profile(spec: EnvironmentSpec) -> LimitProfile:
    profile = spec.limit_profile()
    if profile is None:
        raise DomainError("this experiment needs a limit profile; declare `limit` in the environment config")
    return profile


def _law(cfg: ExperimentConfig, spec: EnvironmentSpec) -> CppLaw:
    return make_cpp_law(_profile(spec), cfg.t, bool(cfg.params.get("require_increase", True)))


def _horizon(cfg: ExperimentConfig, N: int) -> int:
    n = horizon_generations(N, cfg.t)
    if n < 1:
        raise DomainError(f"floor(t N) = 0 at N = {N}")
    return n


def _binned_cdf_table(samples: np.ndarray, cdf) -> dict:
    """Histogram of the sample next to the bin-averaged density of the target cdf."""
    table = histogram_table(samples)
    left, right = table["bin_left"], table["bin_right"]
    table["theoretical"] = (np.asarray(cdf(right)) - np.asarray(cdf(left))) / (right - left)
    return table


# ------------------------------------------------------------------ kinds
def _run_survival(cfg, spec, report, tables):
    profile = spec.limit_profile()
    raw = {"N": [], "replicate": [], "Z_n": [], "capped": []}
    plot = {"N": [], "exact": [], "asymptotic": [], "monte_carlo": [], "stderr": []}
    # survival frequencies need unconditioned trees whatever the conditioning flag says
    unconditioned = ExperimentConfig.from_dict({**cfg.to_dict(), "conditioned": False})
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        env = spec.resolve(N, n)
        exact = float(survival_probability_exact(env, n, "pgf_iteration"))
        shape = float(survival_probability_exact(env, n, "shape_series"))
        kappa = spec.kappa(N, cfg.t, env)
        asym = survival_asymptotic(profile, cfg.t, kappa) if profile is not None else None
        rec = _simulate_trees(unconditioned, spec, N, n)
        _note_caps(report, rec, N)
        valid = ~rec["capped"]
        m = int(valid.sum())
        p_hat = float(np.mean(rec["sizes"][valid] > 0)) if m else float("nan")
        se = math.sqrt(max(exact * (1.0 - exact), 0.0) / m) if m else float("nan")
        report.estimates.append({"N": N, "n": n, "kappa": kappa, "exact_pgf_iteration": exact,
                                 "exact_shape_series": shape, "asymptotic": asym, "monte_carlo": p_hat,
                                 "stderr": se, "replicates": m, "N_times_exact": N * exact})
        report.comparisons.append(Comparison(
            f"exact survival methods agree (N={N})", "exact survival recursion: pgf composition vs shape-function series",
            value=shape, target=exact, statistic=abs(shape - exact), tolerance=1e-10,
            passed=abs(shape - exact) <= 1e-10))
        if se > 0:
            zscore = (p_hat - exact) / se
            report.comparisons.append(Comparison(
                f"Monte Carlo survival (N={N})", "exact survival probability",
                value=p_hat, target=exact, statistic=zscore, p_value=float(2 * stats.norm.sf(abs(zscore))),
                passed=bool(2 * stats.norm.sf(abs(zscore)) > _alpha_level(cfg))))
        raw["N"] += [N] * rec["sizes"].size
        raw["replicate"] += list(range(rec["sizes"].size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["capped"] += rec["capped"].astype(int).tolist()
        for key, val in (("N", N), ("exact", exact), ("asymptotic", asym), ("monte_carlo", p_hat), ("stderr", se)):
            plot[key].append(val)
    if profile is not None:
        last = report.estimates[-1]
        ratio = last["exact_pgf_iteration"] / last["asymptotic"]
        tol = float(cfg.params.get("rel_tol", 0.05))
        report.comparisons.append(Comparison(
            f"Kolmogorov estimate (N={last['N']})", "Kolmogorov estimate (2/kappa_N) / int e^{-X} dsigma2",
            value=last["exact_pgf_iteration"], target=last["asymptotic"], statistic=abs(ratio - 1.0),
            tolerance=tol, passed=abs(ratio - 1.0) <= tol, details={"ratio": ratio}))
    tables["raw.csv"] = raw
    tables["plot_survival.csv"] = plot


def _run_yaglom(cfg, spec, report, tables):
    law = _law(cfg, spec)
    raw = {"N": [], "replicate": [], "Z_n": [], "scaled": [], "used": []}
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        kappa = spec.kappa(N, cfg.t)
        rec = _simulate_trees(cfg, spec, N, n)
        _note_caps(report, rec, N)
        ok = _usable(rec)
        x = rec["sizes"][ok] / kappa
        target = stats.expon(scale=law.rho_bar)
        d, p = ks_statistic(x, target.cdf)
        mean = float(x.mean())
        se = float(x.std(ddof=1) / math.sqrt(x.size))
        report.estimates.append({"N": N, "n": n, "kappa": kappa, "effective_sample_size": int(x.size),
                                 "mean_scaled_size": mean, "stderr": se, "rho_bar": law.rho_bar})
        report.comparisons.append(_gof_comparison(
            cfg, f"Yaglom law KS (N={N})", "Yaglom limit: Z_N/kappa_N given survival is exponential(rho_bar)",
            d, p, "ks_tol", effective_sample_size=int(x.size)))
        report.comparisons.append(Comparison(
            f"Yaglom mean (N={N})", "mean of the exponential(rho_bar) limit", value=mean, target=law.rho_bar,
            statistic=(mean - law.rho_bar) / se, details={"stderr": se}))
        raw["N"] += [N] * ok.size
        raw["replicate"] += list(range(ok.size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["scaled"] += (rec["sizes"] / kappa).tolist()
        raw["used"] += ok.astype(int).tolist()
        tables[f"plot_yaglom_N{N}.csv"] = histogram_table(x, target.pdf)
    tables["raw.csv"] = raw


def _run_reduced(cfg, spec, report, tables):
    law = _law(cfg, spec)
    s = float(cfg.params.get("s", 0.5 * cfg.t))
    raw = {"N": [], "replicate": [], "Z_n": [], "reduced": [], "first_family": [], "used": []}
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        g = int(math.floor(s * N))
        if not 0 <= g < n:
            raise DomainError(f"s = {s} gives generation {g}, outside 0..{n - 1}")
        kappa = spec.kappa(N, cfg.t)
        rec = _simulate_trees(cfg, spec, N, n, gens=[g], family=g)
        _note_caps(report, rec, N)
        ok = _usable(rec)
        counts_k = rec["reduced"][ok, 0]
        m = max(int(counts_k.max()), 2)
        j = np.arange(1, m + 1)
        yule = yule_reduced_pmf(law, s, j)
        success, fam_mean = survivor_count_law(law, s)
        geom = stats.geom.pmf(j, success)
        counts = np.bincount(counts_k, minlength=m + 1)[1:]
        stat, p, dof = chi_square(counts, yule)
        report.comparisons.append(_gof_comparison(
            cfg, f"reduced process chi-square (N={N}, s={s})",
            "time-changed Yule process: geometric with success e^{-u(s)}", stat, p, "chi2_tol",
            dof=dof, effective_sample_size=int(ok.sum())))
        stat2, p2, dof2 = chi_square(counts, geom)
        report.comparisons.append(_gof_comparison(
            cfg, f"survivor count chi-square (N={N}, s={s})",
            "number of time-s ancestors: geometric with success 1/(1+c)", stat2, p2, "chi2_tol", dof=dof2))
        fam = rec["family"][ok] / kappa
        d, pk = ks_statistic(fam, stats.expon(scale=fam_mean).cdf)
        report.comparisons.append(_gof_comparison(
            cfg, f"ancestral family size KS (N={N}, s={s})",
            "families of time-s ancestors: i.i.d. exponential masses", d, pk, "ks_tol"))
        report.estimates.append({"N": N, "n": n, "generation": g, "kappa": kappa,
                                 "effective_sample_size": int(ok.sum()), "mean_reduced": float(counts_k.mean()),
                                 "yule_success": float(yule[0]), "survivor_success": success,
                                 "family_mean_target": fam_mean, "family_mean": float(fam.mean())})
        raw["N"] += [N] * ok.size
        raw["replicate"] += list(range(ok.size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["reduced"] += rec["reduced"][:, 0].tolist()
        raw["first_family"] += rec["family"].tolist()
        raw["used"] += ok.astype(int).tolist()
        tables[f"plot_reduced_N{N}.csv"] = {"j": j, "observed": counts / counts.sum(), "yule": yule,
                                            "survivor_geometric": geom}
        tables[f"plot_reduced_family_N{N}.csv"] = histogram_table(fam, stats.expon(scale=fam_mean).pdf)
    tables["raw.csv"] = raw


def _run_split_times(cfg, spec, report, tables):
    law = _law(cfg, spec)
    k = int(cfg.params.get("k", 2))
    if k != 2:
        raise DomainError("split_times compares the distance of two sampled leaves; use k = 2")
    raw = {"N": [], "replicate": [], "Z_n": [], "pair_depth": [], "used": []}
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        rec = _simulate_trees(cfg, spec, N, n, sample_size=2)
        _note_caps(report, rec, N)
        ok = _usable(rec) & ~np.isnan(rec["pair"])
        depth = rec["pair"][ok]
        x = depth / N
        # generation depths are limit depths rounded up to the lattice j/N, whose cdf is the mixture cdf at j/N
        lattice = np.arange(1, n + 1)
        target = np.array([mixture_cdf(law, float(min(j / N, law.t))) for j in lattice])
        d, p = ks_lattice(depth, lattice, target)
        closed = np.asarray(pair_distance_cdf(law, np.minimum(lattice / N, law.t)))
        report.comparisons.append(_gof_comparison(
            cfg, f"pair split depth KS (N={N})", "k = 2 mixture of H^theta laws (quadrature)", d, p, "ks_tol",
            effective_sample_size=int(x.size)))
        report.comparisons.append(Comparison(
            f"mixture quadrature vs closed form (N={N})", "k = 2 closed form 2F(-log F - (1-F))/(1-F)^2",
            statistic=float(np.max(np.abs(target - closed))), tolerance=1e-8,
            passed=bool(np.max(np.abs(target - closed)) <= 1e-8)))
        report.estimates.append({"N": N, "n": n, "effective_sample_size": int(x.size),
                                 "mean_pair_depth": float(x.mean()), "ks_statistic": d})
        raw["N"] += [N] * ok.size
        raw["replicate"] += list(range(ok.size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["pair_depth"] += rec["pair"].tolist()
        raw["used"] += ok.astype(int).tolist()
        tables[f"plot_split_times_N{N}.csv"] = _binned_cdf_table(x, lambda a: pair_distance_cdf(law, np.minimum(a, law.t)))
    if spec.family == "constant-GW" and spec.limit is None:
        points = [float(v) for v in cfg.params.get("density_points", [0.25 * cfg.t, 0.5 * cfg.t, 0.75 * cfg.t])]
        for s in points:
            val, _ = integrate.quad(lambda u: gw_split_time_density(spec.alpha, cfg.t, [u]), 0.0, s,
                                    epsabs=1e-13, epsrel=1e-11, limit=200)
            target = mixture_cdf(law, s)
            report.comparisons.append(Comparison(
                f"closed-form split density (s={s})", "Galton-Watson split-time density integrated over [0, s]",
                value=val, target=target, statistic=abs(val - target), tolerance=1e-6,
                passed=abs(val - target) <= 1e-6))
    tables["raw.csv"] = raw


def _run_cpp_moments(cfg, spec, report, tables):
    law = _law(cfg, spec)
    tol = 1e-8
    for x in cfg.params.get("gamma_x", [0.1, 1.0, 5.0]):
        for kk in cfg.params.get("gamma_k", [2, 3, 4]):
            val = gamma_mixture_density(float(x), int(kk))
            target = math.exp(-float(x))
            report.comparisons.append(Comparison(
                f"gamma mixture identity (x={x}, k={kk})", "mixture of Gamma(k+1, theta+1) densities equals e^{-x}",
                value=val, target=target, statistic=abs(val - target), tolerance=tol, passed=abs(val - target) <= tol))
    base = {"profile": law.profile.to_config(), "t": law.t,
            "require_increase": bool(cfg.params.get("require_increase", True)), "k": 2}
    samples = {}
    for idx, method in enumerate(("direct", "poissonized", "time_changed_brownian")):
        chunks = run_chunks(_cpp_worker, cfg.reps, (cfg.seed, idx), {**base, "method": method},
                            cfg.parallelism, cfg.chunk_size)
        samples[method] = {"z": np.concatenate([c["z"] for c in chunks]),
                           "pair": np.concatenate([c["mats"][:, 0, 1] for c in chunks])}
    names = list(samples)
    for a in range(3):
        for b in range(a + 1, 3):
            d, p = ks_two_sample(samples[names[a]]["pair"], samples[names[b]]["pair"])
            report.comparisons.append(_gof_comparison(
                cfg, f"sampler agreement {names[a]} vs {names[b]}",
                "direct, poissonized and time-changed Brownian k-samples share one law", d, p, "ks_tol"))
    d, p = ks_statistic(samples["direct"]["pair"], lambda a: pair_distance_cdf(law, a))
    report.comparisons.append(_gof_comparison(
        cfg, "direct sampler vs k = 2 mixture cdf", "k = 2 mixture of H^theta laws", d, p, "ks_tol"))
    z = samples["direct"]["z"]
    for kk in cfg.params.get("moment_k", [1, 2, 3]):
        vals = z ** int(kk)
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(vals.size))
        target = cpp_moment_exact(law, int(kk))
        report.estimates.append({"k": int(kk), "moment": est, "stderr": se, "target": target})
        report.comparisons.append(Comparison(
            f"CPP moment k={kk}", "polynomial moment of the CPP with phi = 1: k! rho_bar^k",
            value=est, target=target, statistic=abs(est - target) / se, tolerance=3.0,
            passed=abs(est - target) <= 3.0 * se, details={"stderr": se}))
    report.estimates.append({"rho_bar": law.rho_bar, "draws": cfg.reps})
    raw = {"method": [], "replicate": [], "Z_e": [], "pair_depth": []}
    for method in names:
        raw["method"] += [method] * cfg.reps
        raw["replicate"] += list(range(cfg.reps))
        raw["Z_e"] += samples[method]["z"].tolist()
        raw["pair_depth"] += samples[method]["pair"].tolist()
    tables["raw.csv"] = raw
    tables["plot_cpp_pair_depth.csv"] = _binned_cdf_table(samples["direct"]["pair"],
                                                          lambda a: pair_distance_cdf(law, a))


def _random_tiny_environment(rng: np.random.Generator, n: int) -> ResolvedEnvironment:
    laws = [OffspringLaw(rng.dirichlet(np.ones(3))) for _ in range(n)]
    return ResolvedEnvironment.from_laws(laws, n)


def _threshold_phi(c: int):
    def phi(m):
        iu = np.triu_indices(m.shape[0], 1)
        return float(np.all(m[iu] <= c))
    return phi


def _run_many_to_few(cfg, spec, report, tables):
    ks = [int(k) for k in cfg.params.get("k", [2, 3])]
    depth_laws = list(cfg.params.get("depth_laws", ["uniform", "profile_p_bar"]))
    tol = float(cfg.params.get("tolerance", 1e-10))
    if spec.family == "explicit-list":
        n = len(spec.laws)
        envs = [(n, spec.resolve(n, n))]
    else:
        rng = np.random.default_rng(cfg.seed)
        n_max = int(cfg.params.get("n_max", 3))
        envs = []
        for _ in range(int(cfg.params.get("battery", 20))):
            n = int(rng.integers(1, n_max + 1))
            envs.append((n, _random_tiny_environment(rng, n)))
    raw = {"environment": [], "n": [], "k": [], "phi": [], "depth_law": [], "lhs": [], "rhs": [], "difference": []}
    worst = 0.0
    for e_idx, (n, env) in enumerate(envs):
        phis = [("one", lambda m: 1.0)] + [(f"max<= {c}", _threshold_phi(c)) for c in range(1, n)]
        for k in ks:
            for name, phi in phis:
                for kind in depth_laws:
                    cmp = enumerate_exact(env, n, k, phi, kind)
                    worst = max(worst, cmp.difference)
                    for key, val in (("environment", e_idx), ("n", n), ("k", k), ("phi", name), ("depth_law", kind),
                                     ("lhs", cmp.lhs), ("rhs", cmp.rhs), ("difference", cmp.difference)):
                        raw[key].append(val)
    cases = len(raw["lhs"])
    report.estimates.append({"environments": len(envs), "cases": cases, "max_difference": worst})
    report.comparisons.append(Comparison(
        "many-to-few identity", "many-to-few formula: sum over k-tuples equals the k-spine expectation",
        statistic=worst, tolerance=tol, passed=worst <= tol, details={"cases": cases}))
    if cfg.params.get("monte_carlo", False):
        n, env = envs[0]
        k = ks[0]
        exact = enumerate_exact(env, n, k, lambda m: 1.0).lhs
        est = many_to_few_estimate(env, n, k, lambda m: 1.0, cfg.reps, np.random.default_rng(cfg.seed))
        report.comparisons.append(Comparison(
            "many-to-few Monte Carlo", "many-to-few formula with sampled depths", value=est.estimate, target=exact,
            statistic=abs(est.estimate - exact) / est.stderr if est.stderr > 0 else 0.0,
            details={"stderr": est.stderr}))
    tables["raw.csv"] = raw


def _run_validate_env(cfg, spec, report, tables):
    profile = _profile(spec)
    diag = validate_near_criticality(spec, cfg.N, cfg.t, profile=profile,
                                     vanish_tolerance=float(cfg.params.get("vanish_tolerance", 0.05)))
    report.notes.extend(diag.notes)
    try:
        law = make_cpp_law(profile, cfg.t, bool(cfg.params.get("require_increase", True)))
    except HypothesisViolationError as exc:
        law = None
        report.notes.append(f"limit CPP unavailable at t = {cfg.t}: {exc}")
    raw = {"N": [], "n": [], "kappa": [], "log_mean_sup_deviation": [], "variance_sum": [], "variance_target": [],
           "min_mean": [], "max_mean": [], "rho_bar_N": []}
    for row in diag.rows:
        disc = build_profile(spec, row.N, cfg.t, kappa=row.kappa)
        est = asdict(row)
        est["rho_bar_N"] = disc.rho_bar
        est["rho_bar_limit"] = None if law is None else law.rho_bar
        report.estimates.append(est)
        for key in raw:
            raw[key].append(est[key])
    last = diag.rows[-1]
    var_tol = float(cfg.params.get("variance_tol", 0.05))
    mean_tol = float(cfg.params.get("mean_tol", 0.05))
    report.comparisons += [
        Comparison("uniform integrability", "vanishing sums E[xi^2 1{xi >= eps sqrt(kappa_N)}]/kappa_N",
                   details=dict(last.uniform_sums), tolerance=diag.vanish_tolerance, passed=diag.uniform_vanishing),
        Comparison("Lindeberg condition", "vanishing sums E[xi^2 1{xi >= eps kappa_N}]/kappa_N",
                   details=dict(last.lindeberg_sums), tolerance=diag.vanish_tolerance,
                   passed=diag.lindeberg_vanishing),
        Comparison("variance convergence", "sum f''_k(1)/kappa_N tends to sigma2(t)", value=last.variance_sum,
                   target=last.variance_target, statistic=last.variance_deviation, tolerance=var_tol,
                   passed=last.variance_deviation <= var_tol),
        Comparison("mean convergence", "log mu_{floor(sN)} tends to X_s", statistic=last.log_mean_sup_deviation,
                   tolerance=mean_tol, passed=last.log_mean_sup_deviation <= mean_tol),
    ]
    if law is not None:
        disc = build_profile(spec, last.N, cfg.t, kappa=last.kappa)
        report.comparisons.append(Comparison(
            "rho_bar convergence", "discrete rho_bar^(N) tends to (1/2) int e^{X_t - X_u} sigma2(du)",
            value=disc.rho_bar, target=law.rho_bar, statistic=abs(disc.rho_bar / law.rho_bar - 1.0)))
        depth = np.arange(1, disc.n + 1) / last.N
        tables["plot_validate_env.csv"] = {"depth": depth, "F_N": disc.F_N,
                                           "F": np.asarray(law.F(np.minimum(depth, law.t)))}
    tables["raw.csv"] = raw


def _run_multiple_mergers(cfg, spec, report, tables):
    if spec.family != "variance-burst":
        raise DomainError("multiple_mergers needs the variance-burst environment family")
    law = _law(cfg, spec)
    w = spec.burst_window
    if not 0 < w < cfg.t:
        raise DomainError("the burst window must lie inside (0, t)")
    mass_target = pair_distance_jump(law, cfg.t - w)
    yule_target = yule_increment_tail(law, w, w, 2, s2_right_limit=True)
    mass_tol = float(cfg.params.get("mass_tol", 0.03))
    yule_tol = float(cfg.params.get("yule_tol", 0.05))
    raw = {"N": [], "replicate": [], "Z_n": [], "pair_depth": [], "reduced_before": [], "reduced_after": [],
           "used": []}
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        first, length, size = spec.burst_geometry(N)
        # MRCAs inside the burst sit at depths n-first-length+2 .. n-first+1; allow 2 generations either side
        lo, hi = n - first - length, n - first + 3
        g1, g2 = first - 1, first + length - 1
        if g2 > n:
            raise DomainError(f"the burst does not end before the horizon at N = {N}")
        rec = _simulate_trees(cfg, spec, N, n, gens=[g1, g2], sample_size=2)
        _note_caps(report, rec, N)
        ok = _usable(rec)
        pair = rec["pair"][ok & ~np.isnan(rec["pair"])]
        mass = float(np.mean((pair >= lo) & (pair <= hi)))
        mass_se = math.sqrt(mass * (1 - mass) / pair.size)
        jump = rec["reduced"][ok, 1] - rec["reduced"][ok, 0]
        freq = float(np.mean(jump >= 2))
        freq_se = math.sqrt(freq * (1 - freq) / jump.size)
        report.estimates.append({"N": N, "n": n, "burst_first": first, "burst_length": length, "burst_size": size,
                                 "window": [lo, hi], "pair_mass": mass, "pair_mass_stderr": mass_se,
                                 "jump_frequency": freq, "jump_frequency_stderr": freq_se,
                                 "effective_sample_size": int(ok.sum())})
        report.comparisons.append(Comparison(
            f"split mass in the burst window (N={N})", "atom of the k = 2 split law at the jump of F",
            value=mass, target=mass_target, statistic=abs(mass - mass_target), tolerance=mass_tol,
            passed=abs(mass - mass_target) <= mass_tol, details={"stderr": mass_se}))
        report.comparisons.append(Comparison(
            f"reduced process jump >= 2 across the burst (N={N})",
            "time-changed Yule increment across the atom of sigma2", value=freq, target=yule_target,
            statistic=abs(freq - yule_target), tolerance=yule_tol, passed=abs(freq - yule_target) <= yule_tol,
            details={"stderr": freq_se}))
        raw["N"] += [N] * ok.size
        raw["replicate"] += list(range(ok.size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["pair_depth"] += rec["pair"].tolist()
        raw["reduced_before"] += rec["reduced"][:, 0].tolist()
        raw["reduced_after"] += rec["reduced"][:, 1].tolist()
        raw["used"] += ok.astype(int).tolist()
        tables[f"plot_multiple_mergers_N{N}.csv"] = _binned_cdf_table(
            pair / N, lambda a: pair_distance_cdf(law, np.minimum(a, law.t)))
    tables["raw.csv"] = raw


def _run_simulate(cfg, spec, report, tables):
    dump = bool(cfg.params.get("genealogy", False))
    raw = {"N": [], "replicate": [], "Z_n": [], "capped": []}
    for N in sorted(cfg.N):
        n = _horizon(cfg, N)
        rec = _simulate_trees(cfg, spec, N, n, dump=dump)
        _note_caps(report, rec, N)
        valid = ~rec["capped"]
        z = rec["sizes"][valid]
        report.estimates.append({"N": N, "n": n, "conditioned": cfg.conditioned, "replicates": int(valid.sum()),
                                 "mean_Z_n": float(z.mean()), "survival_fraction": float(np.mean(z > 0)),
                                 "max_Z_n": int(z.max())})
        raw["N"] += [N] * z.size
        raw["replicate"] += list(range(rec["sizes"].size))
        raw["Z_n"] += rec["sizes"].tolist()
        raw["capped"] += rec["capped"].astype(int).tolist()
        if dump:
            tables[f"genealogy_N{N}.txt"] = [
                "" if d is None else ",".join(str(int(v)) for v in d) for d in rec["genealogy"]]
        tables[f"plot_simulate_N{N}.csv"] = histogram_table(z.astype(float))
    tables["raw.csv"] = raw


def _run_cpp_sample(cfg, spec, report, tables):
    law = _law(cfg, spec)
    k = int(cfg.params.get("points", 3))
    method = cfg.params.get("method", "direct")
    payload = {"profile": law.profile.to_config(), "t": law.t,
               "require_increase": bool(cfg.params.get("require_increase", True)), "k": k, "method": method}
    chunks = run_chunks(_cpp_worker, cfg.reps, cfg.seed, payload, cfg.parallelism, cfg.chunk_size)
    z = np.concatenate([c["z"] for c in chunks])
    mats = np.concatenate([c["mats"] for c in chunks])
    raw = {"replicate": np.arange(cfg.reps), "Z_e": z}
    for i in range(k):
        for j in range(i + 1, k):
            raw[f"d_{i}_{j}"] = mats[:, i, j]
    report.estimates.append({"method": method, "points": k, "draws": cfg.reps, "mean_Z_e": float(z.mean()),
                             "rho_bar": law.rho_bar, "mean_pair_depth": float(mats[:, 0, 1].mean()) if k > 1 else None})
    if method == "direct":
        se = float(z.std(ddof=1) / math.sqrt(z.size))
        report.comparisons.append(Comparison(
            "mean CPP mass", "Z_e is exponential with mean rho_bar", value=float(z.mean()), target=law.rho_bar,
            statistic=abs(float(z.mean()) - law.rho_bar) / se, details={"stderr": se}))
    tables["raw.csv"] = raw
    if k > 1:
        tables["plot_cpp_sample.csv"] = _binned_cdf_table(mats[:, 0, 1], lambda a: pair_distance_cdf(law, a))


_RUNNERS = {
    "survival": _run_survival,
    "yaglom": _run_yaglom,
    "reduced": _run_reduced,
    "split_times": _run_split_times,
    "cpp_moments": _run_cpp_moments,
    "many_to_few_check": _run_many_to_few,
    "validate_env": _run_validate_env,
    "multiple_mergers": _run_multiple_mergers,
    "simulate": _run_simulate,
    "cpp_sample": _run_cpp_sample,
}


# ----------------------------------------------------------------- output
def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path: Path, table) -> None:
    """Write a dict of equal-length columns as CSV, or a list of lines as text."""
    path = Path(path)
    if isinstance(table, list):
        path.write_text("".join(line + "\n" for line in table))
        return
    columns = list(table)
    data = [np.asarray(table[c]).tolist() if isinstance(table[c], np.ndarray) else list(table[c]) for c in columns]
    lengths = {len(col) for col in data}
    if len(lengths) > 1:
        raise DomainError(f"columns of {path.name} have different lengths {sorted(lengths)}")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in zip(*data):
            writer.writerow([_format(v) for v in row])


def run_experiment(config) -> StatReport:
    """Run one experiment and, when ``out_dir`` is set, write report.json, raw.csv and plot_*.csv.

    Outputs other than the runtime block of the report depend only on the
    configuration and seed, not on the degree of parallelism.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    spec = cfg.environment_spec()
    report = StatReport(cfg.kind, cfg.seed, cfg.config_hash(), cfg.to_dict())
    tables: dict = {}
    start = time.perf_counter()
    _RUNNERS[cfg.kind](cfg, spec, report, tables)
    report.runtime = {"seconds": time.perf_counter() - start, "parallelism": cfg.parallelism,
                      "chunk_size": cfg.chunk_size, "python": platform.python_version(),
                      "numpy": np.__version__}
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in sorted(tables):
            write_table(out / name, tables[name])
            report.files.append(name)
        report.files.append("report.json")
        (out / "report.json").write_text(report.to_json() + "\n")
    return report
