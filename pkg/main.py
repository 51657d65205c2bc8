"""Main entry point for the crystal-surface workbench."""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from crystal_surface import config
from crystal_surface.current_fit import ConstantSigma
from crystal_surface.errors import CrystalSurfaceError, SelectionInconclusive
from crystal_surface.harness import (
    FIGURE_SCHEMAS,
    ExperimentConfig,
    diagnose_local_equilibrium,
    emit_figure_data,
    gibbs_test,
    load_or_run_ensemble,
    pipeline_sigma,
    pipeline_verify_pde,
    run_ensemble,
    time_averaging_report,
)
from crystal_surface.kmc import InitialProfile
from crystal_surface.pde import PdeField, solve_h_pde
from crystal_surface.utils import DataLoader, FileHandler, RunLogger

EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description='Crystal surface workbench - Metropolis KMC, local equilibrium diagnostics, sigma fit, PDE'
    )
    parser.add_argument('command', choices=['simulate', 'diagnose-le', 'gibbs-test', 'fit-sigma',
                                            'solve-pde', 'verify-pde', 'emit-figures'])
    parser.add_argument('--config', type=str, default='desk', help='YAML config path or preset name')
    parser.add_argument('--N', type=int, nargs='+', help='Override lattice sizes')
    parser.add_argument('--K', type=float, help='Override coupling K')
    parser.add_argument('--n-samples', type=int, help='Override replicate count')
    parser.add_argument('--seed', type=int, help='Override master seed')
    parser.add_argument('--threads', type=int, help='Number of threads')
    parser.add_argument('--output-dir', type=str, help='Override output directory')
    parser.add_argument('--sigma', type=str, help='SigmaCurve file (solve-pde, verify-pde)')
    parser.add_argument('--figures', type=str, nargs='+', default=sorted(FIGURE_SCHEMAS),
                        help='Figure ids for emit-figures')
    parser.add_argument('--render', action='store_true', help='Also render SVG panels')
    parser.add_argument('--fresh', action='store_true', help='Simulate even if a completed run of this config exists')
    parser.add_argument('--quiet', action='store_true', help='No per-replicate progress')
    return parser.parse_args(argv)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {
        'N_values': args.N,
        'K': args.K,
        'n_samples': args.n_samples,
        'master_seed': args.seed,
        'threads': args.threads,
        'output_dir': args.output_dir,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


def print_configuration(cfg: ExperimentConfig, command: str, logger: RunLogger):
    print("\n" + "="*60)
    print("CONFIGURATION")
    print("="*60)
    print(f"Command:     {command}")
    print(f"Config:      {cfg.name} ({cfg.config_hash[:12]})")
    print(f"K:           {cfg.K}  ({cfg.rate_family.value})")
    print(f"N:           {cfg.N_values}")
    print(f"Initial:     {cfg.profile_family}, c={cfg.amplitude}")
    print(f"Samples:     {cfg.n_samples}  (seed {cfg.master_seed})")
    print(f"Times:       {cfg.times}")
    print(f"Threads:     {cfg.threads}")
    print(f"Output:      {cfg.output_dir}")
    print(f"Log file:    {logger.get_log_path()}")
    print("="*60 + "\n")


def print_summary(rows):
    print("\n" + "="*60)
    print("SUMMARY")
    print("="*60)
    for name, value in rows:
        print(f"{name + ':':22s} {value}")
    print("="*60)


def _load_sigma(path):
    if path is None:
        return ConstantSigma(1.0)
    return DataLoader.load_sigma_curve(path)


def _ensemble(cfg, logger, verbose, fresh=False):
    if fresh:
        return run_ensemble(cfg, verbose=verbose, logger=logger)
    return load_or_run_ensemble(cfg, verbose=verbose, logger=logger)


def cmd_simulate(cfg, logger, verbose, fresh):
    result, manifest = _ensemble(cfg, logger, verbose, fresh)
    print_summary([("Replicates", cfg.n_samples * len(cfg.N_values)),
                   ("Files", len(manifest.files)),
                   ("Manifest", Path(cfg.output_dir) / "manifest.json")])
    return EXIT_OK


def cmd_diagnose(cfg, logger, verbose):
    result, _ = _ensemble(cfg, logger, verbose)
    reports = diagnose_local_equilibrium(result)
    text = []
    rows = [("epsilon(N)", reports["epsilon_by_N"])]
    verdicts = []
    for name, report in reports.items():
        if report is None or not hasattr(report, "to_text"):
            continue
        text.append(report.to_text())
        passed = report.passed
        verdicts.append(passed)
        rows.append((name, "PASS" if passed else "FAIL"))
        logger.log_success(name, "diagnose", f"passed={passed}")
    if 0.0 in cfg.delta_grid and len(cfg.delta_grid) > 1:
        averaging = time_averaging_report(result)
        text.append(averaging.to_text() + "\n")
        rows.append(("time-averaging gap decreasing", averaging.decreasing_in_N))
    FileHandler.atomic_write_text(Path(cfg.output_dir) / "diagnose_le.txt", "\n".join(text))
    print_summary(rows)
    return EXIT_OK if all(verdicts) else EXIT_FAILED


def cmd_gibbs(cfg, logger, verbose):
    result, _ = _ensemble(cfg, logger, verbose)
    report = gibbs_test(result)
    FileHandler.atomic_write_text(Path(cfg.output_dir) / "gibbs_test.txt", report.to_text())
    FileHandler.save_frame(report.profile_frame(), Path(cfg.output_dir) / "gibbs_profile.csv")
    logger.log_success(f"N{max(cfg.N_values)}", "gibbs_test", report.verdict)
    print_summary([("Reference 12K", report.reference),
                   ("Sites above", f"{report.fraction_above:.1%}"),
                   ("Sites below", f"{report.fraction_below:.1%}"),
                   ("Verdict", report.verdict)])
    # the Gibbs hypothesis is expected to be rejected
    return EXIT_OK if report.verdict == "not-local-gibbs" else EXIT_FAILED


def cmd_fit_sigma(cfg, logger, verbose):
    try:
        fit = pipeline_sigma(cfg, logger=logger, verbose=verbose)
    except SelectionInconclusive as e:
        print(f"\n⚠️  Selection inconclusive: {e}")
        print(f"Sweep written to: {cfg.output_dir}")
        return EXIT_FAILED
    print_summary([("epsilon*", fit.epsilon), ("delta*", fit.delta), ("burn-in time", fit.burn_in_time),
                   ("core (a, b)", (fit.curve.a, fit.curve.b)), ("W", fit.curve.W), ("SigmaCurve", fit.path)])
    return EXIT_OK


def cmd_solve_pde(cfg, logger, sigma_path):
    sigma = _load_sigma(sigma_path)
    G = cfg.pde.G
    profile = InitialProfile.named(cfg.profile_family, cfg.amplitude, G)
    h0 = PdeField(np.roll(profile.grid_values, 1))
    traj = solve_h_pde(h0, sigma, cfg.K, cfg.times[-1], t_eval=cfg.times, rtol=cfg.pde.rtol, atol=cfg.pde.atol)
    out = Path(cfg.output_dir)
    FileHandler.save_trajectory_csv(traj, out / "pde_h.csv")
    FileHandler.save_trajectory_npz(traj, out / "pde_h.npz")
    logger.log_success("pde", "solve_h_pde", f"G={G} steps={traj.stats.get('nfev')}")
    print_summary([("Grid", G), ("Times", len(traj.times)),
                   ("Mass drift", abs(traj.final.mass - h0.mass)), ("Trajectory", out / "pde_h.npz")])
    return EXIT_OK


def cmd_verify(cfg, logger, verbose, sigma_path):
    if sigma_path is None:
        print("ERROR: --sigma required for verify-pde")
        return EXIT_ERROR
    report = pipeline_verify_pde(cfg, _load_sigma(sigma_path), logger=logger, verbose=verbose)
    rows = [(f"N={N} sigma / gibbs", f"{report.distance_sigma[N]:.4g} / {report.distance_gibbs[N]:.4g}")
            for N in report.N_values]
    rows.append(("Verdict", "PASS" if report.passed else "FAIL"))
    print_summary(rows)
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_emit_figures(cfg, logger, verbose, figure_ids, render, sigma_path):
    result, _ = _ensemble(cfg, logger, verbose)
    results = {"ensemble": result}
    if "no-gibbs" in figure_ids:
        results["gibbs_report"] = gibbs_test(result)
    if "time-average" in figure_ids and 0.0 in cfg.delta_grid and len(cfg.delta_grid) > 1:
        results["time_average"] = time_averaging_report(result)
    sweeps = sorted(Path(cfg.output_dir).glob("sigma_sweep_N*.csv"))
    if sweeps:
        results["selection_sweep"] = DataLoader.load_frame(sweeps[-1])
    if sigma_path is not None:
        curve = _load_sigma(sigma_path)
        results["sigma_curves"] = {curve.K: curve}
        if "pde-evolution" in figure_ids:
            results["verification"] = pipeline_verify_pde(cfg, curve, result=result, logger=logger)
    written, missing = 0, []
    for figure_id in figure_ids:
        try:
            written += len(emit_figure_data(results, figure_id, cfg.output_dir, render=render))
            logger.log_success(figure_id, "emit_figure")
        except CrystalSurfaceError as e:
            missing.append(figure_id)
            logger.log_skip(figure_id, str(e))
    print_summary([("Files written", written), ("Skipped", missing or "none")])
    return EXIT_OK if not missing else EXIT_FAILED


def main(argv=None):
    """Main function."""
    args = parse_args(argv)
    try:
        cfg = build_config(args)
    except CrystalSurfaceError as e:
        print(f"ERROR: {e}")
        return EXIT_ERROR

    FileHandler.ensure_directories(cfg.output_dir, config.LOG_DIR)
    logger = RunLogger(title=f"CRYSTAL SURFACE {args.command.upper()}")
    print_configuration(cfg, args.command, logger)
    verbose = not args.quiet

    try:
        if args.command == 'simulate':
            return cmd_simulate(cfg, logger, verbose, args.fresh)
        if args.command == 'diagnose-le':
            return cmd_diagnose(cfg, logger, verbose)
        if args.command == 'gibbs-test':
            return cmd_gibbs(cfg, logger, verbose)
        if args.command == 'fit-sigma':
            return cmd_fit_sigma(cfg, logger, verbose)
        if args.command == 'solve-pde':
            return cmd_solve_pde(cfg, logger, args.sigma)
        if args.command == 'verify-pde':
            return cmd_verify(cfg, logger, verbose, args.sigma)
        return cmd_emit_figures(cfg, logger, verbose, args.figures, args.render, args.sigma)
    except CrystalSurfaceError as e:
        logger.log_failure(cfg.name, args.command, f"{type(e).__name__}: {e}")
        print(f"\nERROR: {type(e).__name__}: {e}")
        print(f"Check log file for details: {logger.get_log_path()}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
