import math

import numpy as np
import pytest

from crystal_surface.current_fit import ConstantSigma, SigmaPointCloud, fit_quadratic_core, fit_sigma, j_gibbs
from crystal_surface.errors import ContractViolation
from crystal_surface.pde import (
    FieldKind,
    Flux,
    PdeField,
    PsiTable,
    VariationalConfig,
    decay_report,
    energy_phi,
    fourier_amplitude,
    gradient_flow_solve,
    linear_decay_rate,
    phi_eval,
    phi_gradient,
    proximal_step,
    psi_eval,
    reconstruct_h_from_w,
    solve_h_pde,
    solve_w_pde,
    solve_z_pde,
    third_derivative,
)
from crystal_surface.utils import DataLoader, FileHandler

TWO_PI = 2 * math.pi


def _sin(G, amplitude=1.0, mode=1, kind=FieldKind.HEIGHT):
    return PdeField.from_function(lambda x: amplitude * np.sin(TWO_PI * mode * x), G, kind=kind)


# --- method of lines ---

def test_constant_height_is_stationary():
    h0 = PdeField(np.full(64, 3.0))
    traj = solve_h_pde(h0, None, 2.0, 1e-3)
    assert np.allclose(traj.final.values, 3.0, atol=1e-14)


@pytest.mark.parametrize("K", [1.0, 2.0])
def test_small_sinusoid_decays_at_the_linear_rate(K):
    A = 1e-6
    rate = linear_decay_rate(K)
    t_end = 1.0 / rate
    traj = solve_h_pde(_sin(256, A), ConstantSigma(1.0), K, t_end, atol=1e-16)
    measured = fourier_amplitude(traj.final.values) / A
    assert measured == pytest.approx(math.exp(-1.0), rel=0.01)
    assert Flux(ConstantSigma(1.0), K).linear_coefficient * TWO_PI ** 4 == pytest.approx(rate)


def test_height_mass_is_conserved():
    h0 = PdeField.from_function(lambda x: 0.003 * (1 - np.exp(-np.sin(TWO_PI * x))), 128)
    traj = solve_h_pde(h0, None, 2.0, 2e-3)
    assert traj.final.mass == pytest.approx(h0.mass, abs=1e-12)
    assert traj.stats["nfev"] > 0


def test_zero_slope_third_derivative_is_stationary():
    traj = solve_w_pde(PdeField(np.zeros(64), kind=FieldKind.THIRD_DERIV), None, 2.0, 1e-3)
    assert np.all(traj.final.values == 0.0)


def test_nonzero_mean_w_is_rejected():
    with pytest.raises(ContractViolation):
        solve_w_pde(PdeField(np.ones(64), kind=FieldKind.THIRD_DERIV), None, 2.0, 1e-3)


def test_small_grid_is_rejected():
    with pytest.raises(ContractViolation):
        solve_h_pde(PdeField(np.zeros(16)), None, 1.0, 1e-3)


def test_h_w_and_z_solvers_agree():
    K, G, t_end = 2.0, 64, 2e-3
    h0 = _sin(G, 0.003)
    times = np.linspace(0.0, t_end, 5)
    h = solve_h_pde(h0, None, K, t_end, t_eval=times, rtol=1e-10, atol=1e-13)
    w = solve_w_pde(PdeField(third_derivative(h0), kind=FieldKind.THIRD_DERIV), None, K, t_end,
                    t_eval=times, rtol=1e-10, atol=1e-13)
    z0 = (np.roll(h0.values, -1) - h0.values) * G
    z = solve_z_pde(PdeField(z0 - z0.mean(), kind=FieldKind.SLOPE), None, K, t_end,
                    t_eval=times, rtol=1e-10, atol=1e-13)
    w_from_h = third_derivative(h.final.values)
    scale = np.max(np.abs(w.values[0]))
    assert np.max(np.abs(w_from_h - w.final.values)) < 1e-4 * scale
    z_from_h = (np.roll(h.final.values, -1) - h.final.values) * G
    assert np.max(np.abs(z_from_h - z.final.values)) < 1e-4 * np.max(np.abs(z0))


def test_w_mode_decay():
    K, A = 1.0, 1e-6
    rate = linear_decay_rate(K, mode=2)
    w0 = _sin(256, A, mode=2, kind=FieldKind.THIRD_DERIV)
    traj = solve_w_pde(w0, None, K, 0.5 / rate, atol=1e-16)
    assert fourier_amplitude(traj.final.values, mode=2) / A == pytest.approx(math.exp(-0.5), rel=0.01)


# --- third derivatives and reconstruction ---

def test_third_derivative_of_sine():
    G = 256
    h = np.sin(TWO_PI * np.arange(G) / G)
    x_stag = (np.arange(G) + 0.5) / G
    expected = -(TWO_PI ** 3) * np.cos(TWO_PI * x_stag)
    assert np.max(np.abs(third_derivative(h) - expected)) < 1e-3 * TWO_PI ** 3
    nodal = third_derivative(h, staggered=False)
    assert np.max(np.abs(nodal + TWO_PI ** 3 * np.cos(TWO_PI * np.arange(G) / G))) < 1e-3 * TWO_PI ** 3


def test_zero_w_reconstructs_constant():
    h = reconstruct_h_from_w(PdeField(np.zeros(64)), 5.0)
    assert np.allclose(h.values, 5.0)


def test_cosine_w_reconstructs_sine():
    G = 256
    x = np.arange(G) / G
    w = PdeField(-(TWO_PI ** 3) * np.cos(TWO_PI * x), kind=FieldKind.THIRD_DERIV)
    h = reconstruct_h_from_w(w, 0.0)
    assert np.max(np.abs(h.values - np.sin(TWO_PI * x))) < 2e-3


def test_reconstruction_round_trip():
    G = 256
    h0 = PdeField.from_function(lambda x: 0.5 + 0.2 * np.sin(TWO_PI * x) + 0.1 * np.cos(2 * TWO_PI * x), G)
    w = PdeField(third_derivative(h0), kind=FieldKind.THIRD_DERIV)
    back = reconstruct_h_from_w(w, h0.mass, staggered=True)
    assert np.max(np.abs(back.values - h0.values)) < 2e-3
    assert back.mass == pytest.approx(h0.mass, abs=1e-4)


# --- energy ---

@pytest.mark.parametrize("u", [0.0, 1.0, -1.0, 3.0, -3.0])
def test_psi_closed_form(u):
    assert psi_eval(u) == pytest.approx(math.cosh(u) - 1.0, abs=1e-8)


def test_psi_offset_and_evenness():
    assert psi_eval(0.0, c_offset=0.3) == pytest.approx(0.3, abs=1e-14)
    u = np.linspace(0.1, 5.5, 12)
    sigma = ConstantSigma(1.3)
    assert np.allclose(psi_eval(u, sigma, K=2.0), psi_eval(-u, sigma, K=2.0), rtol=1e-9)
    assert np.all(np.diff(psi_eval(u, sigma, K=2.0)) > 0)


def test_phi_of_flat_profile_is_offset():
    assert phi_eval(PdeField(np.zeros(32), kind=FieldKind.SLOPE), c_offset=0.05) == pytest.approx(0.05)
    assert energy_phi(np.zeros(32), c_offset=0.2) == pytest.approx(0.2)


def test_phi_gradient_matches_finite_differences():
    G = 64
    cfg = VariationalConfig()
    psi = cfg.psi_table()
    x = np.arange(G) / G
    z = 0.01 * np.sin(TWO_PI * x) + 0.004 * np.cos(3 * TWO_PI * x)
    e = np.sin(2 * TWO_PI * x)
    h = 1e-4
    fd = (phi_eval(z + h * e, psi=psi) - phi_eval(z - h * e, psi=psi)) / (2 * h)
    analytic = float(np.dot(phi_gradient(z, psi), e)) / G
    assert fd == pytest.approx(analytic, rel=1e-6)


def test_flux_derivative():
    flux = Flux(ConstantSigma(1.3), K=2.0)
    u = np.linspace(-2, 2, 9)
    h = 1e-6
    assert np.allclose(flux.derivative(u), (flux(u + h) - flux(u - h)) / (2 * h), rtol=1e-6)
    assert flux(0.0) == 0.0


# --- fitted sigma through the solvers ---

@pytest.fixture(scope="module")
def fitted_sigma():
    """Symmetrized spline fit of 1 + 0.5 tanh(w^2) at K = 2."""
    omega = np.linspace(-2.2, 2.2, 2201)
    cloud = SigmaPointCloud(omega, (1.0 + 0.5 * np.tanh(omega ** 2)) * j_gibbs(omega, 2.0), 2.0, 0.05)
    return fit_sigma(cloud, fit_quadratic_core(cloud, 0.1), 0.05, 0.1, W=2.0)


def test_fitted_flux_is_odd_with_a_consistent_derivative(fitted_sigma):
    flux = Flux(fitted_sigma, K=2.0)
    # stays off +-W, where sigma' jumps to zero
    u = np.linspace(-2.95, 2.95, 60)
    assert np.allclose(flux(-u), -flux(u), rtol=1e-10, atol=0)
    h = 1e-6
    assert np.allclose(flux.derivative(u), (flux(u + h) - flux(u - h)) / (2 * h), rtol=1e-5, atol=1e-10)


def test_psi_table_of_fitted_flux(fitted_sigma):
    psi = PsiTable(Flux(fitted_sigma, K=2.0))
    inside = fitted_sigma.knots[np.abs(fitted_sigma.knots) <= psi.span]
    assert np.all(np.isin(inside, psi.nodes))
    u = np.linspace(0.05, 3.5, 24)
    assert np.allclose(psi(-u), psi(u), rtol=1e-8)
    h = 1e-5
    assert np.allclose((psi(u + h) - psi(u - h)) / (2 * h), psi.first(u), rtol=1e-6)


def test_phi_gradient_with_fitted_sigma(fitted_sigma):
    G = 64
    psi = PsiTable(Flux(fitted_sigma, K=2.0))
    x = np.arange(G) / G
    z = 0.01 * np.sin(TWO_PI * x) + 0.004 * np.cos(3 * TWO_PI * x)
    e = np.sin(2 * TWO_PI * x)
    h = 1e-4
    fd = (phi_eval(z + h * e, psi=psi) - phi_eval(z - h * e, psi=psi)) / (2 * h)
    analytic = float(np.dot(phi_gradient(z, psi), e)) / G
    assert fd == pytest.approx(analytic, rel=1e-6)


def test_fitted_sigma_keeps_even_heights_even(fitted_sigma):
    G, K = 64, 2.0
    h0 = PdeField.from_function(lambda x: 0.003 * np.cos(TWO_PI * x) + 0.001 * np.cos(2 * TWO_PI * x), G)
    traj = solve_h_pde(h0, fitted_sigma, K, 2e-3, rtol=1e-10, atol=1e-13)
    final = traj.final.values
    assert traj.final.mass == pytest.approx(h0.mass, abs=1e-12)
    # x -> -x maps node j to node -j
    np.testing.assert_allclose(final[(-np.arange(G)) % G], final, rtol=0, atol=1e-10)
    assert fourier_amplitude(final) < fourier_amplitude(h0.values)


def test_phi_decreases_along_the_fitted_solution(fitted_sigma):
    G, K, t_end = 64, 2.0, 2e-3
    h0 = _sin(G, 0.003)
    z0 = (np.roll(h0.values, -1) - h0.values) * G
    traj = solve_z_pde(PdeField(z0 - z0.mean(), kind=FieldKind.SLOPE), fitted_sigma, K, t_end,
                       t_eval=np.linspace(0.0, t_end, 9), rtol=1e-10, atol=1e-13)
    psi = PsiTable(Flux(fitted_sigma, K))
    phis = np.array([phi_eval(v, psi=psi) for v in traj.values])
    assert np.all(np.diff(phis) <= 1e-12 * phis[0])
    assert phis[-1] < phis[0]


def test_height_scheme_converges_at_second_order():
    K, t_end = 2.0, 2e-3
    reference = solve_h_pde(_sin(512, 0.003), ConstantSigma(1.0), K, t_end, rtol=1e-10, atol=1e-13).final.values
    errors = []
    for G in (32, 64, 128):
        final = solve_h_pde(_sin(G, 0.003), ConstantSigma(1.0), K, t_end, rtol=1e-10, atol=1e-13).final.values
        errors.append(np.max(np.abs(final - reference[::512 // G])))
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.6))


# --- proximal gradient flow ---

def test_flat_profile_is_a_fixed_point():
    cfg = VariationalConfig()
    z = PdeField(np.zeros(64), kind=FieldKind.SLOPE)
    out = proximal_step(z, 1e-4, cfg)
    assert np.allclose(out.values, 0.0, atol=cfg.inner_tol)


def test_small_step_is_an_explicit_euler_step():
    G = 64
    cfg = VariationalConfig()
    psi = cfg.psi_table()
    z = _sin(G, 0.01, kind=FieldKind.SLOPE)
    errors = []
    for tau in (1e-5, 5e-6):
        prox = proximal_step(z, tau, cfg, psi).values
        explicit = z.values - tau * phi_gradient(z.values, psi)
        errors.append(np.max(np.abs(prox - explicit)))
    assert 3.0 < errors[0] / errors[1] < 5.0


def test_flat_start_stays_flat():
    result = gradient_flow_solve(PdeField(np.zeros(32), kind=FieldKind.SLOPE), 1e-3, 5, VariationalConfig())
    assert np.allclose(result.final.values, 0.0)


def test_gradient_flow_tracks_the_slope_equation():
    G, t_end = 64, 5e-4
    z0 = _sin(G, 0.01, kind=FieldKind.SLOPE)
    cfg = VariationalConfig()
    result = gradient_flow_solve(z0, t_end, 200, cfg)
    reference = solve_z_pde(z0, Flux.unit(), 1.0, t_end, rtol=1e-9, atol=1e-14).final.values
    assert np.max(np.abs(result.final.values - reference)) < 1e-2 * 0.01
    assert result.l2_nonincreasing
    assert result.energy_nonincreasing
    assert result.l2_bound_holds


def test_decay_report_is_above_the_poincare_rate():
    cfg = VariationalConfig()
    result = gradient_flow_solve(_sin(64, 0.01, kind=FieldKind.SLOPE), 5e-4, 50, cfg)
    report = decay_report(result)
    assert report.rate_kappa4 == pytest.approx(0.05 * TWO_PI ** 4)
    assert report.rate_kappa2 == pytest.approx(0.05 * TWO_PI ** 2)
    assert report.empirical_rate >= report.rate_kappa4
    assert report.time_derivative_nonincreasing


def test_floor_above_sigma_is_rejected():
    with pytest.raises(ContractViolation):
        VariationalConfig(sigma=ConstantSigma(0.01))


def test_trajectory_files_reload(tmp_path):
    traj = solve_h_pde(_sin(64, 0.003), None, 1.0, 1e-3, t_eval=[0.0, 5e-4, 1e-3])
    FileHandler.save_trajectory_npz(traj, tmp_path / "h.npz")
    FileHandler.save_trajectory_csv(traj, tmp_path / "h.csv")
    loaded = DataLoader.load_trajectory(tmp_path / "h.npz")
    assert loaded.kind is FieldKind.HEIGHT
    np.testing.assert_array_equal(loaded.values, traj.values)
    assert len(DataLoader.load_frame(tmp_path / "h.csv")) == 3 * 64
