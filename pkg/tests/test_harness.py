import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from crystal_surface import config, diagnostics
from crystal_surface.current_fit import ConstantSigma, j_gibbs
from crystal_surface.diagnostics import Roughness
from crystal_surface.errors import ConfigurationError, FigureDataError, OutputConflictError
from crystal_surface.harness import (
    MANIFEST_NAME,
    EnsembleResult,
    ExperimentConfig,
    ExperimentRunner,
    RunManifest,
    diagnose_local_equilibrium,
    emit_figure_data,
    gibbs_test,
    load_or_run_ensemble,
    pipeline_sigma,
    pipeline_verify_pde,
    run_ensemble,
    time_averaging_report,
)
from crystal_surface.utils import DataLoader, RunLogger


def _synthetic_generator(amplitude=1.5, noise=1e-4, sigma=None, ratio_noise=0.0):
    """
    Replicates whose current is sigma(w) times the local-Gibbs current of their slope.

    ``ratio_noise`` adds independent normal noise of that scale to each
    site's sigma sample before it multiplies the local-Gibbs current.
    """

    def generate(N, t, delta, rng):
        x = np.arange(1, N + 1) / N
        w = amplitude * np.sin(2 * np.pi * x) + rng.normal(0.0, noise, N)
        K = 1.0
        planted = np.ones(N) if sigma is None else sigma(w)
        if ratio_noise:
            planted = planted + rng.normal(0.0, ratio_noise, N)
        return np.stack([w, w * w, planted * j_gibbs(w, K), np.exp(6 * K + 2 * K * w),
                         np.exp(6 * K - 2 * K * w), np.zeros(N)])

    return generate


def _planted(w):
    return 1.0 + 0.5 * np.tanh(w ** 2)


@pytest.fixture
def sigma_config(tmp_path):
    return ExperimentConfig(
        name="synthetic",
        K=1.0,
        N_values=[128, 256],
        profile_family="sin2",
        amplitude=0.003,
        n_samples=4,
        times=[0.0, 1.0e-4, 2.0e-4],
        epsilon_grid=[1.0 / 256, 1.0 / 128, 1.0 / 64],
        delta_grid=[0.0, 1.0e-5],
        master_seed=11,
        output_dir=tmp_path / "runs" / "synthetic",
        threads=1,
    )


# --- configuration ---

def test_grids_are_sorted(tiny_config):
    cfg = replace(tiny_config, epsilon_grid=[0.125, 1.0 / 32, 1.0 / 16], delta_grid=[2e-5, 0.0])
    assert cfg.epsilon_grid == [1.0 / 32, 1.0 / 16, 0.125]
    assert cfg.delta_grid == [0.0, 2e-5]


@pytest.mark.parametrize("override", [
    {"epsilon_grid": [1.0 / 64]},
    {"epsilon_grid": [0.75]},
    {"times": [1e-4, 1e-4]},
    {"times": [-1e-4, 0.0]},
    {"n_samples": 0},
    {"delta_grid": [-1e-5]},
    {"N_values": []},
    {"profile_family": "triangle"},
    {"threads": 0},
])
def test_invalid_configs_are_rejected(tiny_config, override):
    with pytest.raises(ConfigurationError):
        replace(tiny_config, **override)


def test_yaml_round_trip(tiny_config, tmp_path):
    path = tmp_path / "tiny.yaml"
    tiny_config.save(path)
    loaded = ExperimentConfig.load(path)
    assert loaded == tiny_config
    assert loaded.config_hash == tiny_config.config_hash


def test_presets_load():
    for name in ("desk", "desk_sigma", "full_scale"):
        cfg = ExperimentConfig.load(name)
        assert cfg.name == name
    assert ExperimentConfig.load("desk_sigma").profile_family == "sin2"


def test_unknown_preset():
    with pytest.raises(ConfigurationError, match="no config file"):
        ExperimentConfig.load("no-such-preset")


def test_schema_version_and_missing_keys(tiny_config):
    data = tiny_config.to_dict()
    data["schema_version"] = 99
    with pytest.raises(ConfigurationError, match="schema_version"):
        ExperimentConfig.from_dict(data)
    data = tiny_config.to_dict()
    del data["model"]["K"]
    with pytest.raises(ConfigurationError, match="'K'"):
        ExperimentConfig.from_dict(data)


def test_config_hash_ignores_threads_and_output_dir(tiny_config, tmp_path):
    same = replace(tiny_config, threads=1, output_dir=tmp_path / "elsewhere")
    assert same.config_hash == tiny_config.config_hash
    assert replace(tiny_config, master_seed=8).config_hash != tiny_config.config_hash
    assert replace(tiny_config, K=1.5).config_hash != tiny_config.config_hash


# --- manifest ---

def test_manifest_records_seeds_and_decisions(tiny_config):
    manifest = RunManifest.for_config(tiny_config)
    assert manifest.seeds["16"][:2] == ["7:16:0", "7:16:1"]
    assert len(manifest.seeds["32"]) == tiny_config.n_samples
    assert manifest.decisions["time_window"] == "[t, t+delta]"
    manifest.write(tiny_config.output_dir)
    loaded = RunManifest.load(tiny_config.output_dir)
    assert loaded.config_hash == tiny_config.config_hash
    assert loaded.status == "running"


def test_output_dir_of_another_config_is_refused(tiny_config):
    RunManifest.for_config(tiny_config).write(tiny_config.output_dir)
    other = replace(tiny_config, master_seed=99)
    with pytest.raises(OutputConflictError):
        run_ensemble(other, verbose=False)
    RunManifest.guard(tiny_config.output_dir, tiny_config.config_hash)


# --- ensembles ---

def test_single_replicate_at_time_zero_is_the_initial_condition(tiny_config):
    cfg = replace(tiny_config, n_samples=1, threads=1)
    result, manifest = run_ensemble(cfg, verbose=False)
    for N in cfg.N_values:
        h = result.series(N, 0.0, 0.0, "h")
        assert h.n_samples == 1
        np.testing.assert_array_equal(h.mean, result.initial_heights[N].mean)
        assert np.all(h.variance == 0.0)
    assert manifest.status == "complete"
    on_disk = json.loads((cfg.output_dir / MANIFEST_NAME).read_text())
    assert on_disk["status"] == "complete"
    assert on_disk["files"]


def test_ensemble_outputs_do_not_depend_on_threads(tiny_config, tmp_path):
    serial = replace(tiny_config, threads=1, output_dir=tmp_path / "serial")
    pooled = replace(tiny_config, threads=4, output_dir=tmp_path / "pooled")
    _, m1 = run_ensemble(serial, verbose=False)
    _, m2 = run_ensemble(pooled, verbose=False)
    assert m1.files == m2.files
    assert len(m1.files) > 0


def test_series_files_reload(tiny_config):
    result, _ = run_ensemble(tiny_config, verbose=False)
    path = tiny_config.output_dir / "series" / "w_N32_t0.0002_d2e-05_e0.0625.csv"
    loaded = DataLoader.load_meso_series(path)
    expected = result.series(32, 2e-4, 2e-5, "w", 0.0625)
    np.testing.assert_allclose(loaded.mean, expected.mean)
    assert loaded.n_samples == tiny_config.n_samples


def test_completed_run_is_reused(tiny_config, monkeypatch):
    first, manifest = run_ensemble(tiny_config, verbose=False)

    def refuse(self):
        raise AssertionError("a completed run was simulated again")

    monkeypatch.setattr(ExperimentRunner, "run", refuse)
    again, reused = load_or_run_ensemble(tiny_config, verbose=False)
    assert reused.files == manifest.files
    for N in tiny_config.N_values:
        np.testing.assert_allclose(again.series(N, 2e-4, 2e-5, "w", 0.0625).mean,
                                   first.series(N, 2e-4, 2e-5, "w", 0.0625).mean, rtol=1e-15)
        np.testing.assert_allclose(again.series(N, 1e-4, 0.0, "J").variance,
                                   first.series(N, 1e-4, 0.0, "J").variance, rtol=1e-15)
        np.testing.assert_allclose(again.initial_heights[N].mean, first.initial_heights[N].mean, rtol=1e-15)


def test_changed_series_file_is_simulated_again(tiny_config):
    run_ensemble(tiny_config, verbose=False)
    path = tiny_config.output_dir / "series" / "w_N32_t0.0002_d2e-05_e0.0625.csv"
    path.write_text(path.read_text() + "\n")
    logger = RunLogger(title="TEST")
    _, manifest = load_or_run_ensemble(tiny_config, verbose=False, logger=logger)
    assert "simulating again" in open(logger.get_log_path()).read()
    assert manifest.stale_files(tiny_config.output_dir) == []


def test_init_figure_uses_the_sampled_initial_heights(tiny_config):
    result, _ = run_ensemble(tiny_config, verbose=False)
    path = emit_figure_data({"ensemble": result}, "init", tiny_config.output_dir)[0]
    frame = pd.read_csv(path)
    for N in tiny_config.N_values:
        rows = frame[frame["N"] == N]
        np.testing.assert_allclose(rows["mean_h"], result.initial_heights[N].mean)
        np.testing.assert_allclose(rows["variance_h"], result.initial_heights[N].variance, atol=1e-12)


def test_unknown_epsilon_is_rejected(sigma_config):
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator())
    with pytest.raises(ConfigurationError):
        result.series(128, 0.0, 0.0, "w", 0.2)


def test_diagnostics_report_every_check(tiny_config):
    result, _ = run_ensemble(tiny_config, verbose=False)
    reports = diagnose_local_equilibrium(result)
    assert set(reports) == {"epsilon_by_N", "E", "V", "boundedness", "Ef_J", "Ef_w2",
                            "roughness_w", "roughness_J"}
    assert set(reports["epsilon_by_N"]) == set(tiny_config.N_values)
    for name in ("E", "V", "boundedness", "Ef_J", "Ef_w2"):
        assert reports[name].passed in (True, False)
    table = time_averaging_report(result).table
    assert set(table["N"]) == set(tiny_config.N_values)


# --- simulated ensembles at desk scale ---

@pytest.fixture(scope="module")
def desk_ensemble(tmp_path_factory):
    """The desk preset, instantaneous measurements only, simulated once per module."""
    root = tmp_path_factory.mktemp("desk")
    cfg = replace(ExperimentConfig.load("desk"), n_samples=96, times=[0.0, 2.0e-5, 4.0e-5],
                  delta_grid=[0.0], output_dir=root / "runs")
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(config, "LOG_DIR", root / "logs")
        result, _ = run_ensemble(cfg, verbose=False)
    return result


@pytest.mark.slow
def test_simulated_ensemble_is_in_rough_local_equilibrium(desk_ensemble):
    reports = diagnose_local_equilibrium(desk_ensemble)
    assert reports["V"].slope <= -0.5
    assert reports["E"].passed
    assert reports["roughness_w"].verdict is Roughness.ROUGH
    assert list(reports["roughness_w"].N_values) == [64, 128, 256]


@pytest.mark.slow
def test_simulated_currents_collapse_across_N(desk_ensemble):
    cfg = desk_ensemble.config
    t = cfg.times[-1]
    eps_by_N = diagnose_local_equilibrium(desk_ensemble)["epsilon_by_N"]
    largest = sorted(cfg.N_values)[-2:]
    report = diagnostics.test_Ef_collapse({
        N: (desk_ensemble.series(N, t, 0.0, "w", eps_by_N[N]).mean,
            desk_ensemble.series(N, t, 0.0, "J", eps_by_N[N]).mean)
        for N in largest
    })
    assert report.passed


@pytest.mark.slow
def test_simulated_ensemble_is_not_local_gibbs(desk_ensemble):
    report = gibbs_test(desk_ensemble)
    assert report.log_product.size * desk_ensemble.config.n_samples >= 20000
    assert report.lower_bound_holds
    assert report.fraction_above >= 0.25
    assert report.verdict == "not-local-gibbs"


# --- sigma pipeline ---

def test_synthetic_gibbs_current_fits_sigma_one(sigma_config):
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator())
    fit = pipeline_sigma(sigma_config, result=result, verbose=False)
    assert fit.burn_in_time == 0.0
    assert fit.epsilon == pytest.approx(1.0 / 64)
    assert fit.delta == pytest.approx(1e-5)
    omega = np.linspace(-fit.curve.W, fit.curve.W, 101)
    assert np.max(np.abs(fit.curve(omega) - 1.0)) < 0.02
    assert fit.curve.metadata["initial_family"] == "sin2"
    assert fit.path.exists()
    reloaded = DataLoader.load_sigma_curve(fit.path)
    np.testing.assert_allclose(reloaded(omega), fit.curve(omega))
    assert (sigma_config.output_dir / "sigma_sweep_N256.csv").exists()


def test_planted_sigma_is_recovered(sigma_config):
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator(sigma=_planted))
    fit = pipeline_sigma(sigma_config, result=result, verbose=False)
    omega = np.linspace(-0.9 * fit.curve.W, 0.9 * fit.curve.W, 201)
    assert np.max(np.abs(fit.curve(omega) - _planted(omega))) < 0.03
    assert fit.curve.b == pytest.approx(0.5, abs=0.1)
    assert fit.curve.monotonicity_defect() < 0.02


def test_noisy_current_still_recovers_planted_sigma(sigma_config):
    # noise on each site's sigma sample, i.e. on J / J_gibbs
    noise = 0.01
    result = EnsembleResult.from_generator(
        sigma_config, _synthetic_generator(sigma=_planted, ratio_noise=noise))
    fit = pipeline_sigma(sigma_config, result=result, verbose=False)
    assert fit.burn_in_time == 0.0
    omega = np.linspace(-0.9 * fit.curve.W, 0.9 * fit.curve.W, 201)
    assert np.max(np.abs(fit.curve(omega) - _planted(omega))) <= 3 * noise


def test_sigma_fit_needs_the_reserved_profile(tiny_config):
    with pytest.raises(ConfigurationError, match="sin2"):
        pipeline_sigma(tiny_config, result=object(), verbose=False)


def test_verification_refuses_the_fitting_profile(sigma_config):
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator())
    fit = pipeline_sigma(sigma_config, result=result, verbose=False)
    with pytest.raises(ConfigurationError, match="different"):
        pipeline_verify_pde(sigma_config, fit.curve, result=result)


@pytest.mark.slow
def test_verification_report(tiny_config):
    result, _ = run_ensemble(tiny_config, verbose=False)
    cfg = replace(tiny_config, pde=replace(tiny_config.pde, G=64))
    report = pipeline_verify_pde(cfg, ConstantSigma(1.0), result=result)
    assert report.N_values == sorted(tiny_config.N_values)
    assert all(d >= 0 for d in report.distance_sigma.values())
    # identical sigma: both solutions coincide
    assert report.distance_sigma == pytest.approx(report.distance_gibbs)
    assert (cfg.output_dir / "verify_pde.txt").exists()
    assert list(report.profiles.columns) == ["N", "t", "x", "solution", "kmc_increment", "pde_increment"]


# --- figure data ---

def test_ensemble_figures(sigma_config):
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator())
    results = {"ensemble": result, "gibbs_report": gibbs_test(result),
               "time_average": time_averaging_report(result),
               "sigma_curves": {1.0: ConstantSigma(1.0)}}
    out = sigma_config.output_dir
    for figure_id, columns in [
        ("init", ["N", "x", "h0", "mean_h", "variance_h"]),
        ("E", ["N", "t", "epsilon", "x", "mean_w_bar"]),
        ("no-gibbs", ["i_over_N", "log_product", "stderr", "reference_12K"]),
        ("sigma", ["K", "omega", "sigma"]),
        ("time-average", ["N", "t", "delta", "sup_distance", "mean_distance"]),
    ]:
        paths = emit_figure_data(results, figure_id, out)
        frame = pd.read_csv(paths[0])
        assert list(frame.columns) == columns
        assert len(frame) > 0
    no_gibbs = pd.read_csv(out / "figures" / "no-gibbs.csv")
    # exact product measure
    np.testing.assert_allclose(no_gibbs["log_product"], 12.0, atol=1e-6)
    assert np.allclose(pd.read_csv(out / "figures" / "sigma.csv")["sigma"], 1.0)


def test_missing_figure_input_writes_nothing(tmp_path):
    with pytest.raises(FigureDataError):
        emit_figure_data({}, "no-gibbs", tmp_path)
    assert not (tmp_path / "figures" / "no-gibbs.csv").exists()


def test_unknown_figure(tmp_path):
    with pytest.raises(ConfigurationError):
        emit_figure_data({}, "fig-99", tmp_path)


def test_render_writes_svg(sigma_config):
    pytest.importorskip("matplotlib")
    result = EnsembleResult.from_generator(sigma_config, _synthetic_generator())
    paths = emit_figure_data({"ensemble": result}, "rough-profiles", sigma_config.output_dir, render=True)
    assert paths[1].suffix == ".svg"
    assert paths[1].read_text().lstrip().startswith("<?xml")


def test_full_scale_preset_covers_the_operating_points():
    cfg = ExperimentConfig.load("full_scale")
    for N, (eps, delta) in config.FULL_SCALE_OPERATING_POINTS.items():
        assert N in cfg.N_values
        assert any(abs(e - eps) < 1e-12 for e in cfg.epsilon_grid)
        assert any(abs(d - delta) < 1e-20 for d in cfg.delta_grid)


def test_run_log_lines(tiny_config, isolated_dirs):
    logger = RunLogger(title="TEST")
    run_ensemble(replace(tiny_config, n_samples=2, N_values=[16, 24, 32]), verbose=False, logger=logger)
    logger.log_skip("fig-V", "no data")
    text = open(logger.get_log_path()).read()
    assert logger.get_log_path().startswith(str(isolated_dirs / "logs"))
    assert text.startswith("TEST\n")
    assert "| N16#0        | simulate" in text
    assert "SKIP    | fig-V" in text
