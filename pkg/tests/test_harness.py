import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from bpve.errors import DomainError
from bpve.harness import (
    ExperimentConfig,
    chi_square,
    chunk_bounds,
    chunk_rng,
    fd_bins,
    histogram_table,
    ks_lattice,
    ks_statistic,
    ks_two_sample,
    run_chunks,
    run_experiment,
)
from bpve.harness.cli import main

GW2 = {"family": "constant-GW", "sigma2": 2.0}


# ---------------------------------------------------------- statistics
def test_ks_calibration():
    x = np.random.default_rng(0).exponential(1.0, 10_000)
    d, p = ks_statistic(x, stats.expon.cdf)
    assert d <= 1.63 / np.sqrt(10_000)
    assert p > 0.01


def test_ks_constant_sample():
    d, _ = ks_statistic(np.full(100, 0.5), stats.uniform.cdf)
    assert d >= 0.5


def test_ks_power():
    x = np.random.default_rng(1).exponential(1.0, 10_000)
    d, p = ks_statistic(x, stats.expon(scale=2.0).cdf)
    assert d == pytest.approx(0.25, abs=0.02)
    assert p < 1e-6


def test_ks_errors():
    with pytest.raises(DomainError):
        ks_statistic([], stats.expon.cdf)
    with pytest.raises(DomainError):
        ks_statistic([1.0, 2.0], stats.expon.cdf)


def test_ks_p_values_uniform():
    rng = np.random.default_rng(2)
    ps = [ks_statistic(rng.random(500), stats.uniform.cdf)[1] for _ in range(400)]
    d, _ = ks_statistic(ps, stats.uniform.cdf)
    assert d < 0.1


def test_ks_lattice():
    rng = np.random.default_rng(3)
    support = np.arange(1, 11)
    pmf = np.full(10, 0.1)
    x = rng.integers(1, 11, size=20_000)
    d, p = ks_lattice(x, support, np.cumsum(pmf))
    assert d < 0.02 and p > 0.01
    shifted = np.minimum(x + 1, 10)
    assert ks_lattice(shifted, support, np.cumsum(pmf))[1] < 1e-6
    with pytest.raises(DomainError):
        ks_lattice(x + 0.5, support, np.cumsum(pmf))
    with pytest.raises(DomainError):
        ks_lattice(x, support[::-1], np.cumsum(pmf))


def test_ks_two_sample():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=5000), rng.normal(size=5000)
    assert ks_two_sample(a, b)[1] > 0.01
    assert ks_two_sample(a, b + 0.3)[1] < 1e-6


def test_chi_square_examples():
    pmf = stats.geom.pmf(np.arange(1, 8), 0.5)
    pmf /= pmf.sum()
    stat, p, dof = chi_square(pmf * 1e4, pmf)
    assert stat == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(5)
    draws = rng.geometric(0.5, 10_000)
    counts = np.bincount(draws, minlength=30)[1:30]
    pmf = stats.geom.pmf(np.arange(1, 30), 0.5)
    assert chi_square(counts, pmf)[1] > 0.01
    other = stats.geom.pmf(np.arange(1, 30), 1 / 3)
    assert chi_square(counts, other)[1] < 1e-6
    with pytest.raises(DomainError):
        chi_square([10, 0], [0.999, 0.001], min_expected=5)


def test_histogram_table():
    x = np.random.default_rng(6).exponential(1.0, 5000)
    edges = fd_bins(x)
    assert edges.size >= 21
    table = histogram_table(x, stats.expon.pdf)
    assert np.sum(table["empirical"] * (table["bin_right"] - table["bin_left"])) == pytest.approx(1.0)
    assert np.allclose(table["theoretical"], np.exp(-table["midpoint"]))


# ---------------------------------------------------------- scheduling
def test_chunking():
    assert chunk_bounds(5, 2) == [(0, 2), (2, 2), (4, 1)]
    a = chunk_rng((7, 100), 0, 10).random(3)
    assert np.array_equal(a, chunk_rng((7, 100), 0, 10).random(3))
    assert not np.array_equal(a, chunk_rng((7, 101), 0, 10).random(3))


def _draw(rng, size, payload):
    return rng.random(size) * payload


def test_run_chunks_independent_of_workers():
    one = np.concatenate(run_chunks(_draw, 1000, 3, 2.0, parallelism=1, chunk_size=128))
    two = np.concatenate(run_chunks(_draw, 1000, 3, 2.0, parallelism=3, chunk_size=128))
    assert np.array_equal(one, two)


# -------------------------------------------------------- configuration
def test_config_validation():
    with pytest.raises(DomainError):
        ExperimentConfig(kind="unknown")
    with pytest.raises(DomainError):
        ExperimentConfig(kind="survival", reps=0)
    with pytest.raises(DomainError):
        ExperimentConfig(kind="survival", t=0.0)
    with pytest.raises(DomainError):
        ExperimentConfig.from_dict({"kind": "survival", "bogus": 1})
    cfg = ExperimentConfig(kind="yaglom", N=500)
    assert cfg.N == [500]


def test_config_hash_ignores_execution_settings():
    a = ExperimentConfig(kind="yaglom", environment=GW2, seed=3)
    b = ExperimentConfig(kind="yaglom", environment=GW2, seed=3, parallelism=4, out_dir="/tmp/x")
    c = ExperimentConfig(kind="yaglom", environment=GW2, seed=4)
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_config_from_file(tmp_path):
    (tmp_path / "env.yaml").write_text(yaml.safe_dump(GW2))
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"kind": "survival", "environment": "env.yaml",
                                                       "N": [50], "reps": 100}))
    cfg = ExperimentConfig.from_file(tmp_path / "exp.yaml")
    assert cfg.environment == GW2
    assert cfg.environment_spec().sigma2 == 2.0


# -------------------------------------------------------- experiments
def _names(report):
    return {c.name: c for c in report.comparisons}


def test_survival_report(tmp_path):
    rep = run_experiment({"kind": "survival", "environment": GW2, "N": [100, 200], "reps": 20_000,
                          "out_dir": str(tmp_path)})
    est = rep.estimates[-1]
    assert est["exact_pgf_iteration"] == pytest.approx(1 / 201, abs=1e-12)
    assert est["asymptotic"] == pytest.approx(1 / 200, rel=1e-12)
    assert rep.passed
    assert {"raw.csv", "plot_survival.csv", "report.json"} <= set(rep.files)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["config_hash"] == rep.config_hash and data["passed"] is True
    assert all(c["source"] for c in data["comparisons"])


def test_yaglom_report():
    rep = run_experiment({"kind": "yaglom", "environment": GW2, "N": [200], "reps": 4000})
    assert rep.estimates[0]["rho_bar"] == pytest.approx(1.0)
    assert rep.estimates[0]["effective_sample_size"] == 4000
    assert rep.passed


def test_reduced_report():
    rep = run_experiment({"kind": "reduced", "environment": GW2, "N": [200], "reps": 4000})
    est = rep.estimates[0]
    assert est["yule_success"] == pytest.approx(0.5) and est["survivor_success"] == pytest.approx(0.5)
    assert est["family_mean_target"] == pytest.approx(0.5)
    assert len(rep.comparisons) == 3


def test_split_times_report():
    rep = run_experiment({"kind": "split_times", "environment": {**GW2, "alpha": 1.0}, "N": [200], "reps": 4000})
    names = _names(rep)
    assert names["mixture quadrature vs closed form (N=200)"].passed
    assert sum(1 for n in names if n.startswith("closed-form split density")) == 3
    assert rep.passed
    with pytest.raises(DomainError):
        run_experiment({"kind": "split_times", "environment": GW2, "N": [50], "reps": 10, "params": {"k": 3}})


def test_many_to_few_report():
    rep = run_experiment({"kind": "many_to_few_check", "seed": 1, "params": {"battery": 5}})
    assert rep.estimates[0]["environments"] == 5
    assert rep.comparisons[0].statistic <= 1e-10 and rep.passed
    explicit = run_experiment({"kind": "many_to_few_check", "reps": 20_000, "params": {"monte_carlo": True},
                               "environment": {"family": "explicit-list",
                                               "laws": [[0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]}})
    assert explicit.estimates[0]["environments"] == 1
    assert explicit.passed


def test_validate_env_report():
    rep = run_experiment({"kind": "validate_env", "environment": GW2, "N": [100, 1000, 10000]})
    assert len(rep.estimates) == 3
    verdicts = {c.name: c.passed for c in rep.comparisons}
    assert verdicts["variance convergence"] and verdicts["mean convergence"]
    assert verdicts["Lindeberg condition"]
    # geometric tails: the sums at eps sqrt(kappa_N) only decay once eps sqrt(N) clears the bulk
    sums = [e["uniform_sums"]["0.1"] for e in rep.estimates]
    assert sums[0] > sums[1] > sums[2]
    assert not verdicts["uniform integrability"]


def test_cpp_sample_and_moments(tmp_path):
    rep = run_experiment({"kind": "cpp_sample", "environment": GW2, "reps": 500, "params": {"points": 4},
                          "out_dir": str(tmp_path)})
    header = (tmp_path / "raw.csv").read_text().splitlines()[0].split(",")
    assert header == ["replicate", "Z_e", "d_0_1", "d_0_2", "d_0_3", "d_1_2", "d_1_3", "d_2_3"]
    rep = run_experiment({"kind": "cpp_moments", "environment": GW2, "reps": 5000,
                          "params": {"gamma_x": [1.0], "gamma_k": [2]}})
    assert len(rep.comparisons) == 1 + 3 + 1 + 3


def test_multiple_mergers_needs_burst():
    with pytest.raises(DomainError):
        run_experiment({"kind": "multiple_mergers", "environment": GW2, "N": [100], "reps": 10})


def test_simulate_genealogy_dump(tmp_path):
    rep = run_experiment({"kind": "simulate", "environment": GW2, "N": [30], "reps": 50, "conditioned": True,
                          "params": {"genealogy": True}, "out_dir": str(tmp_path)})
    lines = (tmp_path / "genealogy_N30.txt").read_text().splitlines()
    assert len(lines) == 50
    raw = (tmp_path / "raw.csv").read_text().splitlines()[1:]
    for line, row in zip(lines, raw):
        z = int(row.split(",")[2])
        depths = [int(v) for v in line.split(",")] if line else []
        assert len(depths) == z - 1
        assert all(1 <= d <= 30 for d in depths)
    assert rep.estimates[0]["survival_fraction"] == 1.0


def test_capped_replicates_are_reported():
    rep = run_experiment({"kind": "simulate", "environment": {"family": "constant-GW", "alpha": 3.0},
                          "N": [40], "reps": 200, "conditioned": False, "params": {"cap": 50}})
    assert any("cap" in note for note in rep.notes)
    assert rep.estimates[0]["replicates"] < 200


def _files(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.suffix in (".csv", ".txt")}


@pytest.mark.parametrize("cfg", [
    {"kind": "yaglom", "environment": GW2, "N": [100], "reps": 3000, "chunk_size": 500},
    {"kind": "reduced", "environment": GW2, "N": [100], "reps": 3000, "chunk_size": 500},
    {"kind": "cpp_moments", "environment": GW2, "reps": 3000, "chunk_size": 500,
     "params": {"gamma_x": [1.0], "gamma_k": [2]}},
    {"kind": "simulate", "environment": GW2, "N": [60], "reps": 600, "chunk_size": 100, "conditioned": False,
     "params": {"genealogy": True}},
], ids=["yaglom", "reduced", "cpp_moments", "simulate"])
def test_byte_identical_outputs(tmp_path, cfg):
    run_experiment({**cfg, "parallelism": 1, "out_dir": str(tmp_path / "a")})
    run_experiment({**cfg, "parallelism": 3, "out_dir": str(tmp_path / "b")})
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys() and "raw.csv" in a
    assert a == b


# ----------------------------------------------------------------- CLI
def test_cli_runs(tmp_path, capsys):
    (tmp_path / "env.yaml").write_text(yaml.safe_dump(GW2))
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"environment": "env.yaml", "reps": 2000}))
    out = tmp_path / "out"
    code = main(["survival", "--config", str(tmp_path / "exp.yaml"), "--n", "100", "--n", "200",
                 "--seed", "5", "--out-dir", str(out), "--assert"])
    assert code == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "report.json" in text
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["N"] == [100, 200] and report["seed"] == 5


def test_cli_exit_codes(capsys):
    assert main(["many-to-few-check", "--seed", "-1"]) == 1
    assert main(["yaglom", "--t", "1.0", "--reps", "0"]) == 1
    # a deliberately tight tolerance makes the Kolmogorov comparison fail
    assert main(["survival", "--n", "50", "--reps", "100"]) == 0
    capsys.readouterr()


def test_cli_assert_failure(tmp_path):
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"environment": GW2, "params": {"rel_tol": 1e-6}}))
    args = ["survival", "--config", str(tmp_path / "exp.yaml"), "--n", "50", "--reps", "100"]
    assert main(args) == 0
    assert main(args + ["--assert"]) == 2


def test_cli_rejects_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["nonsense"])
