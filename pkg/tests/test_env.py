import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bpve.env import (
    EnvironmentSpec,
    LimitProfile,
    OffspringLaw,
    ResolvedEnvironment,
    build_profile,
    evaluate_law,
    rho_bar_riemann,
    select_truncation,
    shape_function,
    stieltjes_integral,
    validate_near_criticality,
)
from bpve.errors import DegenerateEnvironmentError, DomainError

GEOMETRIC = OffspringLaw(0.5 ** np.arange(1, 80))


def weights_strategy(max_size=8):
    return st.lists(st.floats(0.0, 1.0), min_size=2, max_size=max_size).filter(
        lambda w: sum(w) > 1e-3 and sum(w[1:]) > 1e-3).map(lambda w: np.array(w) / sum(w))


# ------------------------------------------------------------------ laws
def test_geometric_moments():
    law = OffspringLaw.linear_fractional(1.0, 2.0)
    assert evaluate_law(law, "mean") == pytest.approx(1.0, abs=1e-10)
    assert evaluate_law(law, "kth_factorial_moment", 2) == pytest.approx(2.0, abs=1e-9)
    assert evaluate_law(law, "pgf", 0.0) == pytest.approx(0.5, abs=1e-15)
    assert law.folded_tail <= 1e-12


def test_delta_two():
    law = OffspringLaw.point_mass(2)
    assert evaluate_law(law, "pgf", 0.3) == pytest.approx(0.09)
    assert evaluate_law(law, "mean") == 2.0
    assert evaluate_law(law, "pgf_derivative", 0.5, 1) == pytest.approx(1.0)


def test_law_domain_errors():
    with pytest.raises(DomainError):
        evaluate_law(GEOMETRIC, "pgf", 1.5)
    with pytest.raises(DomainError):
        evaluate_law(GEOMETRIC, "kth_factorial_moment", 0)
    with pytest.raises(DomainError):
        OffspringLaw([0.5, 0.4])
    with pytest.raises(DomainError):
        OffspringLaw([1.2, -0.2])


def test_shape_function_examples():
    law = OffspringLaw.linear_fractional(1.0, 2.0)
    assert shape_function(law, 0.0) == pytest.approx(1.0, abs=1e-10)
    assert shape_function(law, 1.0) == pytest.approx(1.0, abs=1e-9)
    assert shape_function(OffspringLaw.point_mass(1), 1.0) == 0.0
    with pytest.raises(DomainError):
        shape_function(OffspringLaw.point_mass(0), 0.5)


@settings(max_examples=100, deadline=None)
@given(weights_strategy())
def test_shape_function_identity(w):
    law = OffspringLaw(w)
    s = np.linspace(0.0, 0.9, 10)
    direct = 1.0 / (1.0 - law.pgf(s)) - 1.0 / ((1.0 - s) * law.mean)
    assert np.allclose(shape_function(law, s), direct, atol=1e-10, rtol=1e-10)
    # continuous extension at s = 1 is f''(1) / (2 f'(1)^2)
    assert shape_function(law, 1.0) == pytest.approx(law.factorial_moment(2) / (2 * law.mean ** 2), abs=1e-10)


def test_shape_function_extension_off_criticality():
    # delta_2: 1/(1 - s^2) - 1/(2(1 - s)) = 1/(2(1 + s)), so the value at 1 is 1/4
    law = OffspringLaw.point_mass(2)
    assert shape_function(law, 1.0) == pytest.approx(0.25, abs=1e-15)
    assert shape_function(law, 1.0 - 1e-7) == pytest.approx(1.0 / (2 * (2.0 - 1e-7)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(weights_strategy(12))
def test_normalisation_invariant(w):
    law = OffspringLaw(w)
    assert abs(law.weights.sum() - 1.0) <= 1e-12
    assert law.pgf(1.0) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(weights_strategy(15), st.integers(2, 10))
def test_truncated_moment_bound(w, beta):
    law = OffspringLaw(w).truncated(beta)
    f2 = law.factorial_moment(2)
    for k in range(2, 7):
        assert law.factorial_moment(k) <= beta ** (k - 2) * f2 * (1 + 1e-12) + 1e-15


def test_parametric_families_match_moments():
    for mean, f2 in [(1.0, 2.0), (1.01, 0.5), (0.99, 3.0)]:
        law = OffspringLaw.linear_fractional(mean, f2)
        assert law.mean == pytest.approx(mean, abs=1e-9)
        assert law.factorial_moment(2) == pytest.approx(f2, rel=1e-8)
    nb = OffspringLaw.negative_binomial(1.0, 3.0)
    assert nb.mean == pytest.approx(1.0, abs=1e-8)
    assert nb.factorial_moment(2) == pytest.approx(3.0, rel=1e-6)


# -------------------------------------------------------------- profiles
def test_build_profile_geometric():
    spec = EnvironmentSpec(family="constant-GW", alpha=0.0, sigma2=2.0)
    prof = build_profile(spec, 10, 1.0)
    assert np.allclose(prof.mu, 1.0, atol=1e-12)
    assert prof.rho_bar == pytest.approx(1.0, abs=1e-9)


def test_build_profile_mean_product():
    N, alpha = 500, 1.3
    prof = build_profile(EnvironmentSpec(alpha=alpha), N, 1.0)
    means = prof.env.means()
    for s in (0.1, 0.5, 1.0):
        k = math.floor(s * N)
        assert prof.mu[k] == pytest.approx(np.prod(means[:k]), rel=1e-12)
        # the folded tail moves each mean by at most max_support * 1e-12
        assert prof.mu[k] == pytest.approx((1 + alpha / N) ** k, rel=1e-8)


def test_build_profile_explicit_list():
    spec = EnvironmentSpec(family="explicit-list", laws=([0.2, 0.5, 0.3], [0.3, 0.3, 0.4], [0.25, 0.5, 0.25]),
                           kappa_rule=1.0)
    prof = build_profile(spec, 3, 1.0)
    assert prof.p_bar.size == 3
    assert prof.p_bar.sum() == pytest.approx(1.0, abs=1e-12)
    assert prof.F_N[-1] == 1.0


def test_build_profile_zero_mean():
    spec = EnvironmentSpec(family="explicit-list", laws=([1.0], [0.5, 0.5]), kappa_rule=1.0)
    with pytest.raises(DegenerateEnvironmentError):
        build_profile(spec, 2, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(weights_strategy(5), min_size=1, max_size=6))
def test_rho_bar_two_routes(ws):
    assume(any(len(w) > 2 and w[2:].sum() > 0 for w in ws))
    env = ResolvedEnvironment.from_laws([OffspringLaw(w) for w in ws], len(ws))
    prof = build_profile(env, len(ws), 1.0, kappa=1.0)
    assert rho_bar_riemann(prof) == pytest.approx(prof.rho_bar, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("N", [100, 1000, 10000])
def test_depth_cdf_converges_to_uniform(N):
    prof = build_profile(EnvironmentSpec(), N, 1.0)
    i = np.arange(1, N + 1)
    assert np.max(np.abs(prof.F_N - i / N)) <= 3.0 / N


def test_environment_resolution_is_frozen():
    spec = EnvironmentSpec(family="iid-random-environment", seed=7)
    a = spec.resolve(200).means()
    b = spec.resolve(200).means()
    c = spec.resolve(200, 100).means()
    assert np.array_equal(a, b)
    assert np.array_equal(a[:100], c)


def test_burst_geometry():
    spec = EnvironmentSpec(family="variance-burst", burst_p=0.25, burst_window=0.5)
    first, length, size = spec.burst_geometry(10 ** 4)
    assert (first, length, size) == (5001, 1000, 10)
    env = spec.resolve(10 ** 4)
    assert env.law(first).max_support == 10
    assert env.law(first - 1).max_support > 10
    assert env.law(first + length).max_support > 10


# ------------------------------------------------------------- truncation
def test_truncation_bounded_support():
    laws = ([0.1, 0.2, 0.3, 0.1, 0.1, 0.2],) * 4
    spec = EnvironmentSpec(family="explicit-list", laws=laws, kappa_rule=10.0)
    choice = select_truncation(spec, 4, 1.0, [0.1, 0.01])
    assert choice.beta == 5
    assert choice.mean_tail == 0.0 and choice.square_tail == 0.0


def test_truncation_burst():
    spec = EnvironmentSpec(family="variance-burst", burst_p=0.25, sigma2=1.0)
    N = 10 ** 4
    eps = 1e-3
    choice = select_truncation(spec, N, 1.0, [eps])
    assert choice.attained
    assert choice.beta < choice.kappa
    assert choice.mean_tail <= eps and choice.square_tail <= eps


def test_truncation_geometric_closed_form():
    N, eps = 1000, 1e-3
    choice = select_truncation(EnvironmentSpec(), N, 1.0, [eps])
    # sum_{k>b} k 2^-(k+1) = (b+2) 2^-(b+1); sum_{k>b} k^2 2^-(k+1) = (b^2+4b+6) 2^-(b+1)
    b = 0
    while max(N * (b + 2), b * b + 4 * b + 6) * 2.0 ** -(b + 1) > eps:
        b += 1
    assert choice.beta == b == 24


def test_truncation_unattainable_reports():
    # kappa_N = sqrt(N) = 100 lies below the burst size N^(3/4) = 1000
    spec = EnvironmentSpec(family="variance-burst", burst_p=0.75, sigma2=1.0, kappa_rule="sqrtN")
    choice = select_truncation(spec, 10 ** 4, 1.0, [1e-6])
    assert not choice.attained
    assert choice.eps > 1e-6
    assert "smallest achievable" in choice.message


def test_truncation_schedule_validation():
    with pytest.raises(DomainError):
        select_truncation(EnvironmentSpec(), 100, 1.0, [0.01, 0.1])


# -------------------------------------------------------------- Stieltjes
def test_stieltjes_examples():
    lin = LimitProfile.linear(0.0, 2.0)
    assert stieltjes_integral(lin, lambda u: math.exp(-float(lin.X(u))), 0.0, 1.0) == pytest.approx(2.0, rel=1e-12)
    atom = LimitProfile.linear(0.0, 0.0, s2_jumps=[(0.5, 1.0)])
    assert stieltjes_integral(atom, lambda u: 1.0, 0.5, 1.0) == pytest.approx(1.0)
    assert stieltjes_integral(atom, lambda u: 1.0, 0.6, 1.0) == 0.0
    assert stieltjes_integral(lin, lambda u: math.exp(-u), 0.0, 1.0) == pytest.approx(2 * (1 - math.exp(-1)),
                                                                                      rel=1e-10)
    with pytest.raises(DomainError):
        stieltjes_integral(lin, lambda u: 1.0, 1.0, 0.5)


def test_closed_form_mass_matches_stieltjes():
    prof = LimitProfile.linear(0.7, 1.5, x_jumps=[(0.3, -0.4)], s2_jumps=[(0.6, 0.8)])
    for v in (0.2, 0.6, 0.9):
        quad = stieltjes_integral(prof, lambda u: math.exp(-float(prof.X(u))), 0.0, v, points=[0.3])
        assert float(prof.exp_weighted_mass(v)) == pytest.approx(quad, rel=1e-9)


def test_profile_rejects_common_jumps():
    with pytest.raises(DomainError):
        LimitProfile.linear(0.0, 1.0, x_jumps=[(0.5, 1.0)], s2_jumps=[(0.5, 1.0)])


# ------------------------------------------------------------ diagnostics
def test_near_criticality_gw_drift():
    report = validate_near_criticality(EnvironmentSpec(alpha=1.0, sigma2=2.0), [1000], 1.0)
    row = report.rows[0]
    assert abs(1000 * math.log1p(1 / 1000) - 1.0) <= 1e-2
    assert row.log_mean_sup_deviation <= 1e-2
    assert row.variance_deviation <= 1e-6


def test_near_criticality_delta_one():
    spec = EnvironmentSpec(family="explicit-list", laws=([0.0, 1.0],) * 10, limit={"alpha": 0.0, "sigma2": 2.0})
    report = validate_near_criticality(spec, [10], 1.0)
    assert report.rows[0].variance_sum == 0.0
    assert report.rows[0].variance_deviation == pytest.approx(2.0)


def test_near_criticality_burst_three_quarters():
    spec = EnvironmentSpec(family="variance-burst", burst_p=0.75, sigma2=1.0)
    report = validate_near_criticality(spec, [10 ** 6, 10 ** 9], 1.0)
    assert not report.uniform_vanishing
    assert report.lindeberg_vanishing


def test_config_round_trip(tmp_path):
    path = tmp_path / "env.yaml"
    path.write_text("family: variance-burst\nsigma2: 0.5\nburst:\n  p: 0.25\n  window: 0.4\nseed: 3\n")
    spec = EnvironmentSpec.from_file(path)
    assert spec.burst_window == 0.4
    assert EnvironmentSpec.from_config(spec.to_config()) == spec
    with pytest.raises(DomainError):
        EnvironmentSpec.from_config({"family": "nope"})
    with pytest.raises(DomainError):
        EnvironmentSpec.from_config({"colour": "red"})
