import math

import numpy as np
import pytest

from crystal_surface import diagnostics
from crystal_surface.diagnostics import Roughness
from crystal_surface.errors import ContractViolation, SelectionInconclusive
from crystal_surface.observables import MesoSeries


def _series(N, values, epsilon=0.1):
    return MesoSeries(x_grid=np.arange(1, N + 1) / N, t=0.0, epsilon=epsilon, delta=0.0,
                      mean=values, variance=np.zeros(N), n_samples=10)


def _profile(N, f):
    return f(np.arange(1, N + 1) / N)


# --- (E) ---

def test_identical_profiles_converge():
    f = lambda x: np.sin(2 * np.pi * x)
    report = diagnostics.test_E_convergence([_series(N, _profile(N, f)) for N in (32, 64, 128)])
    assert np.allclose(report.distances, 0.0, atol=1e-12)
    assert report.converged
    assert report.passed


def test_noisy_profiles_converge(rng):
    f = lambda x: np.cos(2 * np.pi * x)
    series = [_series(N, _profile(N, f) + 0.3 * rng.standard_normal(N) / math.sqrt(N))
              for N in (256, 1024, 4096)]
    report = diagnostics.test_E_convergence(series)
    assert report.distances[-1] < report.distances[0]
    assert report.converged


def test_offset_profiles_do_not_converge():
    f = lambda x: np.sin(2 * np.pi * x)
    series = [_series(32, _profile(32, f)), _series(64, _profile(64, f) + 1.0), _series(128, _profile(128, f))]
    report = diagnostics.test_E_convergence(series, tolerance=0.5)
    assert not report.converged
    assert "converged: False" in report.to_text()


def test_E_needs_three_lattices():
    with pytest.raises(ContractViolation):
        diagnostics.test_E_convergence([_series(32, np.zeros(32)), _series(64, np.zeros(64))])


# --- (V) ---

def test_iid_variance_decays():
    N = np.array([100, 200, 400, 800])
    report = diagnostics.test_V_decay(N, 3.0 / N)
    assert report.slope == pytest.approx(-1.0)
    assert report.passed


def test_window_variance_closed_form():
    N = np.array([128, 256, 512])
    eps = 0.05
    report = diagnostics.test_V_decay(N, 0.7 / (2 * N * eps))
    assert report.slope == pytest.approx(-1.0)
    assert report.passed


def test_flat_variance_fails():
    report = diagnostics.test_V_decay([100, 200, 400], [0.5, 0.5, 0.5])
    assert report.slope == pytest.approx(0.0, abs=1e-12)
    assert not report.passed


# --- (Ef) ---

def test_points_on_one_curve_collapse():
    omega = np.linspace(-1, 1, 400)
    report = diagnostics.test_Ef_collapse({100: (omega, omega ** 2), 200: (omega, omega ** 2)})
    assert report.max_distance == pytest.approx(0.0, abs=1e-12)
    assert report.passed


def test_offset_lines_fail():
    omega = np.linspace(-1, 1, 400)
    report = diagnostics.test_Ef_collapse({100: (omega, omega), 200: (omega, omega + 1.0)}, tolerance=0.5)
    assert report.max_distance == pytest.approx(1.0)
    assert not report.passed


def test_window_level_collapse_with_site_level_scatter(rng):
    """
    Sites alternate between two slope laws sharing their window means. The
    window averages collapse across N while per-site pairs do not.
    """
    def generate(N, samples=4000):
        x = np.arange(1, N + 1) / N
        omega = np.sin(2 * np.pi * x)
        spread = np.where(np.arange(N) % 2 == 0, 0.0, 1.0)
        w = omega + spread * rng.choice([-1.0, 1.0], size=(samples, N))
        return omega, (w ** 2).mean(axis=0)

    window, site = {}, {}
    for N in (128, 256):
        omega, f_site = generate(N)
        pairs = np.stack([omega, f_site])
        smooth = 0.5 * (pairs + np.roll(pairs, 1, axis=1))
        window[N] = (smooth[0], smooth[1])
        site[N] = (omega[::2], f_site[::2]) if N == 128 else (omega[1::2], f_site[1::2])
    assert diagnostics.test_Ef_collapse(window, tolerance=0.2).passed
    assert not diagnostics.test_Ef_collapse(site, tolerance=0.2).passed


# --- boundedness ---

def _bounded_series(maxima):
    return {(N, t): (np.full(N, m ** 2), np.full(N, 0.1))
            for N, m in maxima.items() for t in (0.1, 0.2, 0.3)}


def test_constant_maxima_are_bounded():
    report = diagnostics.test_boundedness(_bounded_series({100: 2.0, 200: 2.0, 400: 2.0}))
    assert report.passed


def test_log_growing_maxima_fail_strict_tolerance():
    report = diagnostics.test_boundedness(
        _bounded_series({N: math.log(N) for N in (100, 200, 400)}), slope_tolerance=0.0)
    assert not report.passed


# --- roughness ---

def test_smooth_profile():
    profiles = {N: np.sin(2 * np.pi * np.arange(1, N + 1) / N) for N in (64, 128, 256)}
    report = diagnostics.roughness_metric(profiles)
    assert report.verdict is Roughness.SMOOTH


def test_alternating_profile_is_rough():
    profiles = {N: (-1.0) ** np.arange(1, N + 1) for N in (64, 128, 256)}
    report = diagnostics.roughness_metric(profiles, probe_x=[0.25, 0.5])
    assert np.allclose(report.per_N_metrics, 2.0)
    assert report.verdict is Roughness.ROUGH


def test_roughness_ignores_offsets(rng):
    profiles = {N: rng.normal(size=N) for N in (64, 128, 256)}
    base = diagnostics.roughness_metric(profiles, probe_x=[0.25, 0.6])
    lifted = diagnostics.roughness_metric({N: p + 3.7 for N, p in profiles.items()}, probe_x=[0.25, 0.6])
    np.testing.assert_allclose(lifted.per_N_metrics, base.per_N_metrics, rtol=1e-12)
    assert lifted.verdict is base.verdict


def test_roughness_follows_rotations(rng):
    k = 7
    for N in (64, 128, 256):
        p = rng.normal(size=N)
        plain = diagnostics.roughness_metric(p, probe_x=[0.25, 0.6])
        rotated = diagnostics.roughness_metric(np.roll(p, k), probe_x=[0.25 + k / N, 0.6 + k / N])
        assert rotated.metric == plain.metric
    assert diagnostics.roughness_metric(np.roll(p, k)).metric == diagnostics.roughness_metric(p).metric


def test_single_profile_is_inconclusive():
    report = diagnostics.roughness_metric(np.zeros(32) + 1.0)
    assert report.verdict is Roughness.INCONCLUSIVE
    assert not report.passed


# --- epsilon(N) ---

def test_smooth_profile_takes_smallest_window():
    N = 256
    profile = np.sin(2 * np.pi * np.arange(1, N + 1) / N)
    assert diagnostics.select_epsilon_N(profile) == pytest.approx(1 / N)


def test_rough_profile_needs_wider_window():
    N = 256
    i = np.arange(1, N + 1)
    profile = (-1.0) ** i + np.sin(2 * np.pi * i / N)
    eps = diagnostics.select_epsilon_N(profile)
    assert 1 / N < eps <= 4 / N
    with pytest.raises(SelectionInconclusive):
        diagnostics.select_epsilon_N(profile, epsilon_grid=[1 / N])


def test_dyadic_grid():
    assert np.allclose(diagnostics.dyadic_epsilon_grid(16), [1 / 16, 2 / 16, 4 / 16])


# --- Gibbs analytics ---

def _brute_Z(lam, K, c=0.0):
    n = np.arange(-40, 41)
    return float(np.sum(np.exp(-K * (n - lam) ** 2 + c * K * n)))


def test_partition_function():
    assert diagnostics.gibbs_Z(0.0, 50.0) == pytest.approx(1.0 + 2 * math.exp(-50), rel=1e-15)
    assert abs(diagnostics.gibbs_Z(0.3, 1.0) - diagnostics.gibbs_Z(1.3, 1.0)) < 1e-13
    assert diagnostics.gibbs_Z(0.0, 1.0) == pytest.approx(_brute_Z(0.0, 1.0), rel=1e-12)


@pytest.mark.parametrize("lam", [-0.7, 0.0, 0.25, 0.5, 1.9])
@pytest.mark.parametrize("c", [-4.0, -2.0, 2.0, 4.0])
@pytest.mark.parametrize("K", [0.25, 1.0, 2.0])
def test_exp_moment_matches_series(lam, c, K):
    expected = _brute_Z(lam, K, c) / _brute_Z(lam, K)
    assert diagnostics.gibbs_exp_moment(lam, c, K) == pytest.approx(expected, rel=1e-10)


def test_exp_moment_trivial_exponent():
    assert diagnostics.gibbs_exp_moment(0.37, 0.0, 1.5) == 1.0


def test_product_identity_is_independent_of_lambda(rng):
    K = 1.0
    for lam in rng.uniform(-3, 3, size=(100, 3)):
        m = diagnostics.gibbs_exp_moment
        plus = m(lam[0], 2, K) * m(lam[1], -4, K) * m(lam[2], 2, K)
        minus = m(lam[0], -2, K) * m(lam[1], 4, K) * m(lam[2], -2, K)
        assert math.log(plus * minus) == pytest.approx(12 * K, abs=1e-9)


def test_reference_table_is_periodic():
    ref = diagnostics.GibbsReference.build(1.0, n_lambda=21)
    assert ref.periodicity_error < 1e-12
    assert diagnostics.gibbs_mean_slope(0.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert diagnostics.gibbs_mean_slope(0.5, 1.0) == pytest.approx(0.5, abs=1e-12)


def test_gibbs_sampler_moments(rng):
    draws = diagnostics.gibbs_sample([0.0, 0.3], 1.0, 40_000, rng)
    assert draws.shape == (40_000, 2)
    expected = diagnostics.gibbs_mean_slope(0.3, 1.0)
    assert abs(draws[:, 1].mean() - expected) < 4 * draws[:, 1].std() / math.sqrt(40_000)


# --- local Gibbs test ---

def test_gibbs_samples_are_consistent_with_gibbs(rng):
    K, N, samples = 0.25, 32, 20_000
    lambdas = np.sin(2 * np.pi * np.arange(1, N + 1) / N)
    z = diagnostics.gibbs_sample(lambdas, K, samples, rng)
    f_plus, f_minus = diagnostics.f_pm_from_slopes(z, K)
    se = lambda f: f.std(axis=0, ddof=1) / math.sqrt(samples)
    report = diagnostics.local_gibbs_test((f_plus.mean(axis=0), se(f_plus)),
                                          (f_minus.mean(axis=0), se(f_minus)), K)
    assert report.verdict == "consistent-with-gibbs"
    assert report.passed
    frame = report.profile_frame()
    assert list(frame.columns) == ["i_over_N", "log_product", "stderr", "reference_12K"]


def test_frozen_slopes_are_not_gibbs():
    ones = (np.ones(16), np.zeros(16))
    report = diagnostics.local_gibbs_test(ones, ones, 1.0)
    assert np.allclose(report.log_product, 0.0)
    assert report.verdict == "not-local-gibbs"
    assert not report.lower_bound_holds


def test_excess_above_reference_is_flagged():
    N, K = 40, 1.0
    mean = np.full(N, math.exp(6.5 * K))
    se = mean * 0.01
    report = diagnostics.local_gibbs_test((mean, se), (mean, se), K)
    assert report.fraction_above == 1.0
    assert report.lower_bound_holds
    assert report.verdict == "not-local-gibbs"
