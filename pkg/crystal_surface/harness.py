"""
Experiment orchestration: configuration, seeded parallel ensembles, run
manifests, the sigma and PDE-verification pipelines and figure data.
"""

import hashlib
import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

import crystal_surface
from crystal_surface import config, diagnostics
from crystal_surface.current_fit import (
    ConstantSigma,
    BurnInReport,
    SigmaCurve,
    SigmaPointCloud,
    assemble_point_cloud,
    burn_in_test,
    fit_quadratic_core,
    fit_sigma,
    select_epsilon_delta,
)
from crystal_surface.errors import (
    ConfigurationError,
    CrystalSurfaceError,
    FigureDataError,
    OutputConflictError,
    ReplicateFailure,
    SelectionInconclusive,
)
from crystal_surface.kmc import InitialProfile, ModelParams, RateFamily, replicate_rng, run_until, sample_initial_state
from crystal_surface.observables import (
    OBSERVABLES,
    EnsembleAccumulator,
    MesoSeries,
    compare_time_averaging,
    ensemble_estimate,
    make_recorder,
    window_average_profile,
)
from crystal_surface.pde import PdeField, solve_h_pde, third_derivative
from crystal_surface.utils import DataLoader, FileHandler, RunLogger

MANIFEST_NAME = "manifest.json"
INITIAL_HEIGHTS = "h0"


# --- Configuration ---

@dataclass
class SigmaFitSettings:
    W: Optional[float] = None
    delta0: Optional[float] = None
    delta1: Optional[float] = None
    smoothing_weight: float = config.SMOOTHING_WEIGHT
    symmetrize: bool = config.SYMMETRIZE_SIGMA
    lattice: Optional[int] = None  # N used for the fit; largest N when unset


@dataclass
class PdeSettings:
    G: int = 256
    rtol: float = config.SOLVER_RTOL
    atol: float = config.SOLVER_ATOL


@dataclass
class ExperimentConfig:
    """One experiment: model, initial profile, ensemble size and measurement grids."""

    name: str
    K: float
    N_values: List[int]
    profile_family: str
    amplitude: float
    n_samples: int
    times: List[float]
    epsilon_grid: List[float]
    delta_grid: List[float]
    master_seed: int
    output_dir: Path
    rate_family: RateFamily = RateFamily.METROPOLIS
    threads: int = config.DEFAULT_THREADS
    sigma_fit: SigmaFitSettings = field(default_factory=SigmaFitSettings)
    pde: PdeSettings = field(default_factory=PdeSettings)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.rate_family = RateFamily(self.rate_family)
        self.N_values = [int(n) for n in self.N_values]
        self.times = [float(t) for t in self.times]
        self.epsilon_grid = sorted(float(e) for e in self.epsilon_grid)
        self.delta_grid = sorted(float(d) for d in self.delta_grid)
        for key in ("N_values", "times", "epsilon_grid", "delta_grid"):
            if not getattr(self, key):
                raise ConfigurationError(f"'{key}' must be a nonempty list")
        if any(b <= a for a, b in zip(self.times, self.times[1:])) or self.times[0] < 0:
            raise ConfigurationError("'times' must be nonnegative and strictly increasing")
        if self.n_samples < 1:
            raise ConfigurationError("'n_samples' must be >= 1")
        if any(d < 0 for d in self.delta_grid):
            raise ConfigurationError("'delta_grid' values must be >= 0")
        smallest = min(self.N_values)
        bad = [e for e in self.epsilon_grid if not (1.0 / (2 * smallest) - 1e-12 <= e <= 0.5)]
        if bad:
            raise ConfigurationError(
                f"'epsilon_grid' values {bad} must lie in [1/(2N), 1/2] for N={smallest}")
        if self.threads < 1:
            raise ConfigurationError("'threads' must be >= 1")
        for N in self.N_values:
            self.model_for(N)
        InitialProfile.named(self.profile_family, self.amplitude, config.MIN_LATTICE_SIZE)

    def model_for(self, N: int) -> ModelParams:
        return ModelParams(K=self.K, N=N, rate_family=self.rate_family)

    @property
    def model(self) -> ModelParams:
        return self.model_for(self.N_values[0])

    def profile_for(self, N: int) -> InitialProfile:
        return InitialProfile.named(self.profile_family, self.amplitude, N)

    @property
    def measurement_keys(self) -> List[Tuple[float, float]]:
        return [(t, d) for t in self.times for d in self.delta_grid]

    def to_dict(self) -> dict:
        return {
            "schema_version": config.CONFIG_SCHEMA_VERSION,
            "name": self.name,
            "model": {"K": self.K, "N": list(self.N_values), "rate_family": self.rate_family.value},
            "initial": {"family": self.profile_family, "amplitude": self.amplitude},
            "ensemble": {"n_samples": self.n_samples, "master_seed": self.master_seed,
                         "threads": self.threads},
            "times": list(self.times),
            "epsilon_grid": list(self.epsilon_grid),
            "delta_grid": list(self.delta_grid),
            "sigma_fit": asdict(self.sigma_fit),
            "pde": asdict(self.pde),
            "output_dir": str(self.output_dir),
        }

    @property
    def config_hash(self) -> str:
        """Hash of everything that changes results (threads and output_dir excluded)."""
        data = self.to_dict()
        data["ensemble"].pop("threads")
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        def need(section, key):
            try:
                return section[key]
            except (KeyError, TypeError):
                raise ConfigurationError(f"missing config key '{key}'") from None

        version = data.get("schema_version")
        if version != config.CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(f"'schema_version' must be {config.CONFIG_SCHEMA_VERSION}, got {version}")
        model = need(data, "model")
        initial = need(data, "initial")
        ensemble = need(data, "ensemble")
        N = need(model, "N")
        try:
            return cls(
                name=data.get("name", "experiment"),
                K=float(need(model, "K")),
                N_values=N if isinstance(N, list) else [N],
                rate_family=model.get("rate_family", "metropolis"),
                profile_family=need(initial, "family"),
                amplitude=float(need(initial, "amplitude")),
                n_samples=int(need(ensemble, "n_samples")),
                master_seed=int(need(ensemble, "master_seed")),
                threads=int(ensemble.get("threads", config.DEFAULT_THREADS)),
                times=need(data, "times"),
                epsilon_grid=need(data, "epsilon_grid"),
                delta_grid=data.get("delta_grid", [0.0]),
                output_dir=data.get("output_dir", config.OUTPUT_DIR / data.get("name", "experiment")),
                sigma_fit=SigmaFitSettings(**(data.get("sigma_fit") or {})),
                pde=PdeSettings(**(data.get("pde") or {})),
            )
        except TypeError as e:
            raise ConfigurationError(f"invalid config section: {e}") from None

    @classmethod
    def load(cls, name_or_path) -> "ExperimentConfig":
        """Load a YAML config from a path or a preset name under presets/."""
        path = Path(name_or_path)
        if not path.exists():
            path = config.PRESET_DIR / f"{name_or_path}.yaml"
        if not path.exists():
            raise ConfigurationError(f"no config file or preset named '{name_or_path}'")
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))

    def save(self, path):
        FileHandler.atomic_write_text(path, yaml.safe_dump(self.to_dict(), sort_keys=False))


# --- Manifest ---

def _decisions() -> dict:
    names = ["W_CONVENTION", "TIME_SCALE_EXPONENT", "HEIGHT_AMPLITUDE_EXPONENT", "SATURATION_LIMIT",
             "E_CAUCHY_TOL", "V_SLOPE_ZETA", "EF_COLLAPSE_TOL", "BOUNDEDNESS_SLOPE_TOL",
             "ROUGHNESS_RADIUS", "SMOOTH_THRESHOLD_FRACTION", "GIBBS_SIGMA_MULTIPLE", "GIBBS_SITE_FRACTION",
             "N_BINS", "BIN_MIN_COUNT", "BURN_IN_TOL", "BURN_IN_SCATTER_TOL", "SELECTION_BIAS_TOL",
             "SELECTION_NOISE_TOL", "DELTA0_FRACTION", "DELTA1_FACTOR", "SMOOTHING_WEIGHT", "SIGMA_FLOOR",
             "SIGMA_SYMMETRY_TOL", "SIGMA_KNOTS", "SYMMETRIZE_SIGMA", "SOLVER_RTOL", "SOLVER_ATOL",
             "PROX_INNER_TOL"]
    out = {name.lower(): getattr(config, name) for name in names}
    out["time_window"] = "[t, t+delta]"
    out["run_until_stop"] = "clock set to t_end, pending jump discarded"
    return out


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    config: dict
    seeds: Dict[str, List[str]]
    decisions: dict
    files: Dict[str, str] = field(default_factory=dict)
    status: str = "running"
    created: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    @classmethod
    def for_config(cls, cfg: ExperimentConfig) -> "RunManifest":
        seeds = {str(N): [f"{cfg.master_seed}:{N}:{i}" for i in range(cfg.n_samples)] for N in cfg.N_values}
        return cls(config_hash=cfg.config_hash, code_version=crystal_surface.__version__,
                   config=cfg.to_dict(), seeds=seeds, decisions=_decisions())

    def write(self, output_dir: Path):
        FileHandler.write_json(asdict(self), Path(output_dir) / MANIFEST_NAME)

    def add_file(self, output_dir: Path, path: Path):
        rel = os.path.relpath(path, output_dir)
        self.files[rel] = FileHandler.sha256(path)

    def stale_files(self, output_dir: Path) -> List[str]:
        """Listed files that are missing or no longer match their checksum."""
        stale = []
        for rel, digest in sorted(self.files.items()):
            path = Path(output_dir) / rel
            if not path.exists() or FileHandler.sha256(path) != digest:
                stale.append(rel)
        return stale

    @classmethod
    def load(cls, output_dir: Path) -> Optional["RunManifest"]:
        path = Path(output_dir) / MANIFEST_NAME
        if not path.exists():
            return None
        return cls(**DataLoader.load_json(path))

    @staticmethod
    def guard(output_dir: Path, config_hash: str):
        """Refuse to reuse an output directory written for a different config."""
        existing = RunManifest.load(output_dir)
        if existing is not None and existing.config_hash != config_hash:
            raise OutputConflictError(
                f"{output_dir} holds outputs of config {existing.config_hash[:12]}, not {config_hash[:12]}")


# --- Ensemble results ---

def _series_name(observable, N, t, delta, epsilon) -> str:
    eps = "site" if epsilon is None else f"e{epsilon:.6g}"
    return f"{observable}_N{N}_t{t:.6g}_d{delta:.6g}_{eps}.csv"


class EnsembleResult:
    """
    Aggregated replicate statistics keyed by (N, t, delta).

    Each accumulator holds blocks of shape (1 + n_eps, 6, N): index 0 is the
    per-site value, index k >= 1 the window average at epsilon_grid[k-1].
    Rows follow OBSERVABLES; the height row is in macroscopic units h / N^3.
    A result loaded from disk serves the same series from its CSV files.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.config = cfg
        self.accumulators: Dict[Tuple[int, float, float], EnsembleAccumulator] = {}
        self.initial_heights: Dict[int, MesoSeries] = {}
        self._loaded: Dict[Tuple[int, float, float, int, str], MesoSeries] = {}

    @staticmethod
    def window_stack(block: np.ndarray, epsilons: Sequence[float]) -> np.ndarray:
        return np.stack([block] + [window_average_profile(block, e, axis=-1) for e in epsilons])

    def add_replicate(self, N: int, blocks: Mapping[Tuple[float, float], np.ndarray]):
        for (t, d), block in blocks.items():
            stack = self.window_stack(np.asarray(block, dtype=np.float64), self.config.epsilon_grid)
            self.accumulators.setdefault((N, t, d), EnsembleAccumulator()).add(stack)

    @classmethod
    def from_generator(cls, cfg: ExperimentConfig,
                       generator: Callable[[int, float, float, np.random.Generator], np.ndarray]
                       ) -> "EnsembleResult":
        """
        Build a result from a synthetic replicate generator.

        ``generator(N, t, delta, rng)`` returns a (6, N) block; replicate i at
        lattice N uses the same seeded stream a simulation would.
        """
        result = cls(cfg)
        for N in cfg.N_values:
            for i in range(cfg.n_samples):
                rng = replicate_rng(cfg.master_seed, i, lattice=N)
                result.add_replicate(N, {key: generator(N, key[0], key[1], rng) for key in cfg.measurement_keys})
        return result

    @classmethod
    def load(cls, cfg: ExperimentConfig) -> "EnsembleResult":
        """Read back every series a completed run of ``cfg`` wrote to its output directory."""
        result = cls(cfg)
        series_dir = Path(cfg.output_dir) / "series"
        for N in cfg.N_values:
            for t, d in cfg.measurement_keys:
                for observable in OBSERVABLES:
                    for k, eps in enumerate([None] + list(cfg.epsilon_grid)):
                        path = series_dir / _series_name(observable, N, t, d, eps)
                        result._loaded[(N, t, d, k, observable)] = DataLoader.load_meso_series(path, observable)
            initial = series_dir / _series_name(INITIAL_HEIGHTS, N, 0.0, 0.0, None)
            if initial.exists():
                result.initial_heights[N] = DataLoader.load_meso_series(initial, "h")
        return result

    def _eps_index(self, epsilon: Optional[float]) -> int:
        if epsilon is None:
            return 0
        for k, e in enumerate(self.config.epsilon_grid):
            if math.isclose(e, epsilon, rel_tol=1e-9, abs_tol=1e-15):
                return k + 1
        raise ConfigurationError(f"epsilon {epsilon} is not in the configured grid")

    def series(self, N: int, t: float, delta: float, observable: str, epsilon: Optional[float] = None
               ) -> MesoSeries:
        k = self._eps_index(epsilon)
        acc = self.accumulators.get((N, t, delta))
        if acc is None:
            loaded = self._loaded.get((N, t, delta, k, observable))
            if loaded is None:
                raise ConfigurationError(f"no statistics for N={N}, t={t}, delta={delta}")
            return loaded
        row = OBSERVABLES.index(observable)
        variance = acc.variance[k, row] if acc.count > 1 else np.zeros(N)
        return MesoSeries(
            x_grid=np.arange(1, N + 1) / N, t=t, delta=delta,
            epsilon=1.0 / (2 * N) if epsilon is None else epsilon,
            mean=acc.mean[k, row], variance=np.nan_to_num(variance), n_samples=acc.count,
            observable=observable,
        )

    def save(self, output_dir: Path, manifest: Optional[RunManifest] = None) -> List[Path]:
        """Persist every series (and the sampled initial heights) as MesoSeries CSVs under output_dir/series/."""
        paths = []
        series_dir = Path(output_dir) / "series"
        for (N, t, d) in sorted(self.accumulators):
            for observable in OBSERVABLES:
                for eps in [None] + list(self.config.epsilon_grid):
                    paths.append(series_dir / _series_name(observable, N, t, d, eps))
                    FileHandler.save_meso_series(self.series(N, t, d, observable, eps), paths[-1])
        for N, initial in sorted(self.initial_heights.items()):
            paths.append(series_dir / _series_name(INITIAL_HEIGHTS, N, 0.0, 0.0, None))
            FileHandler.save_meso_series(initial, paths[-1])
        if manifest is not None:
            for path in paths:
                manifest.add_file(output_dir, path)
        return paths


# --- Runner ---

class ExperimentRunner:
    """
    Runs the replicates of an experiment on a thread pool.

    Each replicate owns its state and random stream; results are merged in
    replicate order after the pool finishes, so output does not depend on
    scheduling.
    """

    def __init__(self, cfg: ExperimentConfig, verbose: bool = True, logger: RunLogger = None):
        self.config = cfg
        self.verbose = verbose
        self.print_lock = threading.Lock()
        self.logger = logger or RunLogger()
        self._payloads: Dict[Tuple[int, int], dict] = {}
        self._payload_lock = threading.Lock()
        FileHandler.ensure_directories(cfg.output_dir)

    def _print(self, message: str):
        """Thread-safe print."""
        if self.verbose:
            with self.print_lock:
                print(message)

    def simulate_replicate(self, N: int, index: int) -> dict:
        cfg = self.config
        params = cfg.model_for(N)
        state = sample_initial_state(cfg.profile_for(N), params, replicate_rng(cfg.master_seed, index, lattice=N))
        recorders = {key: make_recorder(*key) for key in cfg.measurement_keys}
        initial = state.heights.copy()
        t_end = max(t + d for t, d in cfg.measurement_keys)
        n_jumps = run_until(state, t_end, list(recorders.values()))
        scale = float(N) ** params.amplitude_exponent
        blocks = {}
        for key, rec in recorders.items():
            block = rec.values.copy()
            block[-1] /= scale
            blocks[key] = block
        state.verify()
        return {"blocks": blocks, "initial": initial / scale, "jumps": n_jumps, "mass": state.mass}

    def run_replicate(self, N: int, index: int) -> Tuple[int, str]:
        """
        Simulate one replicate.

        Returns:
            (index, status)
        """
        key = f"N{N}#{index}"
        try:
            payload = self.simulate_replicate(N, index)
        except CrystalSurfaceError as e:
            self._print(f"[{key}] ✗ Failed - {e}")
            self.logger.log_failure(key, "simulate", f"{type(e).__name__}: {e}")
            return index, f"error_{type(e).__name__}"
        with self._payload_lock:
            self._payloads[(N, index)] = payload
        self._print(f"[{key}] ✓ {payload['jumps']} jumps")
        self.logger.log_success(key, "simulate", f"jumps={payload['jumps']}")
        return index, "ok"

    def run(self) -> EnsembleResult:
        cfg = self.config
        result = EnsembleResult(cfg)
        for N in cfg.N_values:
            indices = list(range(cfg.n_samples))
            if cfg.threads == 1:
                statuses = [self.run_replicate(N, i) for i in indices]
            else:
                with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
                    statuses = list(executor.map(lambda i: self.run_replicate(N, i), indices))
            failed = [i for i, status in statuses if status != "ok"]
            if failed:
                self.logger.log_failure(f"N{N}", "ensemble", f"{len(failed)} replicate(s) failed")
                raise ReplicateFailure(f"{len(failed)} replicate(s) failed at N={N}: {failed[:10]}")
            initial = EnsembleAccumulator()
            for i in indices:
                payload = self._payloads.pop((N, i))
                result.add_replicate(N, payload["blocks"])
                initial.add(payload["initial"])
            result.initial_heights[N] = ensemble_estimate(
                [initial], reduce="mean_and_variance" if initial.count > 1 else "mean", observable="h")
            self.logger.log_success(f"N{N}", "ensemble", f"{cfg.n_samples} replicates merged")
        return result


def run_ensemble(cfg: ExperimentConfig, verbose: bool = True, logger: RunLogger = None
                 ) -> Tuple[EnsembleResult, RunManifest]:
    """Simulate the ensemble, persist every series and the manifest."""
    logger = logger or RunLogger()
    RunManifest.guard(cfg.output_dir, cfg.config_hash)
    manifest = RunManifest.for_config(cfg)
    manifest.write(cfg.output_dir)
    logger.log_success(cfg.name, "manifest", f"config {cfg.config_hash[:12]}")

    result = ExperimentRunner(cfg, verbose=verbose, logger=logger).run()
    result.save(cfg.output_dir, manifest)
    manifest.status = "complete"
    manifest.write(cfg.output_dir)
    logger.log_success(cfg.name, "run_ensemble", f"{len(manifest.files)} files")
    return result, manifest


def load_or_run_ensemble(cfg: ExperimentConfig, verbose: bool = True, logger: RunLogger = None
                         ) -> Tuple[EnsembleResult, RunManifest]:
    """
    Reuse the series of a completed run of the same config, else simulate.

    Reuse requires a manifest with this config hash, status "complete" and
    every listed file still matching its SHA-256.
    """
    logger = logger or RunLogger()
    manifest = RunManifest.load(cfg.output_dir)
    if manifest is not None and manifest.config_hash == cfg.config_hash and manifest.status == "complete":
        stale = manifest.stale_files(cfg.output_dir)
        if not stale:
            logger.log_success(cfg.name, "reuse_ensemble", f"{len(manifest.files)} files")
            return EnsembleResult.load(cfg), manifest
        logger.log_skip(cfg.name, f"cached series changed on disk ({stale[0]}), simulating again")
    return run_ensemble(cfg, verbose=verbose, logger=logger)


# --- Local equilibrium ---

def diagnose_local_equilibrium(result: EnsembleResult, t: Optional[float] = None) -> Dict[str, object]:
    """Run (E), (V), (Ef), boundedness and roughness checks on an ensemble."""
    cfg = result.config
    t = cfg.times[-1] if t is None else t
    d = cfg.delta_grid[0]
    N_values = sorted(cfg.N_values)

    eps_by_N = {}
    for N in N_values:
        site_w = result.series(N, t, d, "w").mean
        try:
            chosen = diagnostics.select_epsilon_N(site_w, [e for e in cfg.epsilon_grid if 2 * N * e >= 1])
        except SelectionInconclusive:
            chosen = cfg.epsilon_grid[-1]
        eps_by_N[N] = chosen

    reports: Dict[str, object] = {"epsilon_by_N": eps_by_N}
    if len(N_values) >= 3:
        reports["E"] = diagnostics.test_E_convergence(
            [result.series(N, t, d, "w", eps_by_N[N]) for N in N_values])
        fixed = cfg.epsilon_grid[-1]
        reports["V"] = diagnostics.test_V_decay(
            N_values, [result.series(N, t, d, "w", fixed).variance for N in N_values])
        reports["boundedness"] = diagnostics.test_boundedness({
            (N, tt): (result.series(N, tt, d, "w2").mean, result.series(N, tt, d, "J").mean)
            for N in N_values for tt in cfg.times
        }) if len(cfg.times) >= 3 else None
    for name, obs in (("Ef_J", "J"), ("Ef_w2", "w2")):
        reports[name] = diagnostics.test_Ef_collapse({
            N: (result.series(N, t, d, "w", eps_by_N[N]).mean, result.series(N, t, d, obs, eps_by_N[N]).mean)
            for N in N_values
        })
    reports["roughness_w"] = diagnostics.roughness_metric({N: result.series(N, t, d, "w").mean for N in N_values})
    reports["roughness_J"] = diagnostics.roughness_metric({N: result.series(N, t, d, "J").mean for N in N_values})
    return reports


def gibbs_test(result: EnsembleResult, N: Optional[int] = None, t: Optional[float] = None):
    cfg = result.config
    N = max(cfg.N_values) if N is None else N
    t = cfg.times[-1] if t is None else t
    d = cfg.delta_grid[0]
    return diagnostics.local_gibbs_test(result.series(N, t, d, "f_plus"), result.series(N, t, d, "f_minus"), cfg.K)


def time_averaging_report(result: EnsembleResult, epsilon: Optional[float] = None):
    """Instantaneous (delta = 0) against time-averaged window means of w, per N and t."""
    cfg = result.config
    if 0.0 not in cfg.delta_grid or len(cfg.delta_grid) < 2:
        raise ConfigurationError("'delta_grid' needs 0 and at least one positive delta")
    eps = cfg.epsilon_grid[-1] if epsilon is None else epsilon
    pairs = [(result.series(N, t, 0.0, "w", eps), result.series(N, t, d, "w", eps))
             for N in sorted(cfg.N_values) for t in cfg.times for d in cfg.delta_grid if d > 0]
    return compare_time_averaging(pairs)


# --- sigma pipeline ---

@dataclass
class SigmaPipelineResult:
    curve: SigmaCurve
    epsilon: float
    delta: float
    burn_in_time: float
    burn_in: List[BurnInReport] = field(default_factory=list)
    sweep: Optional[pd.DataFrame] = None
    path: Optional[Path] = None


def _clouds(result: EnsembleResult, N: int, times, delta0: float) -> Dict[Tuple[float, float], SigmaPointCloud]:
    cfg = result.config
    clouds = {}
    for eps in cfg.epsilon_grid:
        if 2 * N * eps < 1:
            continue
        for d in cfg.delta_grid:
            parts = [assemble_point_cloud(result.series(N, t, d, "w", eps), result.series(N, t, d, "J"),
                                          cfg.K, delta0, seeds=f"{cfg.master_seed}:{N}")
                     for t in times]
            clouds[(eps, d)] = SigmaPointCloud.combine(parts)
    return clouds


def pipeline_sigma(cfg: ExperimentConfig, result: Optional[EnsembleResult] = None,
                   logger: RunLogger = None, verbose: bool = True) -> SigmaPipelineResult:
    """
    Burn-in detection, (epsilon, delta) selection, core and spline fit.

    Writes sigma_K<K>_N<N>.txt plus the sweep and point-cloud CSVs to the
    output directory. An inconclusive selection still persists its sweep.
    """
    logger = logger or RunLogger()
    if cfg.profile_family != "sin2":
        raise ConfigurationError("the sigma fit is reserved for the 'sin2' initial profile")
    if result is None:
        result, _ = load_or_run_ensemble(cfg, verbose=verbose, logger=logger)
    settings = cfg.sigma_fit
    N = settings.lattice or max(cfg.N_values)
    out = Path(cfg.output_dir)

    omega_all = np.concatenate([result.series(N, t, d, "w", e).mean for t in cfg.times
                                for d in cfg.delta_grid for e in cfg.epsilon_grid if 2 * N * e >= 1])
    W = settings.W or float(min(omega_all.max(), -omega_all.min()))
    if not W > 0:
        raise ConfigurationError("sigma_fit.W could not be inferred; the omega range does not straddle 0")
    delta0 = settings.delta0 or config.DELTA0_FRACTION * W
    delta1 = settings.delta1 or config.DELTA1_FACTOR * delta0

    # burn-in: first consecutive pair of times whose clouds lie on one curve
    eps_mid = cfg.epsilon_grid[len(cfg.epsilon_grid) // 2]
    d_min = cfg.delta_grid[0]
    reports, burn_in_time = [], None
    for t_a, t_b in zip(cfg.times, cfg.times[1:]):
        a = _clouds_at(result, N, t_a, eps_mid, d_min, delta0)
        b = _clouds_at(result, N, t_b, eps_mid, d_min, delta0)
        rep = burn_in_test(a, b)
        reports.append(rep)
        logger.log_success(f"N{N}", "burn_in", f"t={t_a:.3g}->{t_b:.3g} distance={rep.distance:.3g} pass={rep.passed}")
        if rep.passed:
            burn_in_time = t_a
            break
    if burn_in_time is None:
        raise SelectionInconclusive("no pair of measurement times passes the burn-in test")
    fit_times = [t for t in cfg.times if t >= burn_in_time]

    clouds = _clouds(result, N, fit_times, delta0)
    try:
        selection = select_epsilon_delta(clouds)
    except SelectionInconclusive as e:
        if e.sweep is not None:
            FileHandler.save_frame(e.sweep, out / f"sigma_sweep_N{N}.csv")
        logger.log_failure(f"N{N}", "select_eps_delta", str(e))
        raise
    FileHandler.save_frame(selection.sweep, out / f"sigma_sweep_N{N}.csv")
    logger.log_success(f"N{N}", "select_eps_delta", f"eps={selection.epsilon} delta={selection.delta}")

    cloud = clouds[(selection.epsilon, selection.delta)]
    FileHandler.save_frame(cloud.to_frame(), out / f"sigma_points_N{N}.csv")
    core = fit_quadratic_core(cloud, delta1)
    curve = fit_sigma(cloud, core, delta0, delta1, W, settings.smoothing_weight, settings.symmetrize)
    curve.metadata.update({"initial_family": cfg.profile_family, "config_hash": cfg.config_hash,
                           "burn_in_time": burn_in_time, "fit_times": fit_times})
    path = out / f"sigma_K{cfg.K:g}_N{N}.txt"
    FileHandler.save_sigma_curve(curve, path)
    logger.log_success(f"N{N}", "fit_sigma", f"a={core[0]:.4g} b={core[1]:.4g} -> {path.name}")
    return SigmaPipelineResult(curve=curve, epsilon=selection.epsilon, delta=selection.delta,
                               burn_in_time=burn_in_time, burn_in=reports, sweep=selection.sweep, path=path)


def _clouds_at(result, N, t, eps, d, delta0):
    cfg = result.config
    return assemble_point_cloud(result.series(N, t, d, "w", eps), result.series(N, t, d, "J"), cfg.K, delta0)


# --- PDE verification ---

@dataclass
class VerificationReport:
    N_values: List[int]
    distance_sigma: Dict[int, float]
    distance_gibbs: Dict[int, float]
    w_distance_sigma: Dict[int, float]
    w_distance_gibbs: Dict[int, float]
    passed: bool
    profiles: pd.DataFrame = field(repr=False, default=None)

    def to_text(self) -> str:
        lines = ["report: VerificationReport"]
        for N in self.N_values:
            lines.append(f"N={N}: sigma={self.distance_sigma[N]:.6g} gibbs={self.distance_gibbs[N]:.6g} "
                         f"w_sigma={self.w_distance_sigma[N]:.6g} w_gibbs={self.w_distance_gibbs[N]:.6g}")
        lines.append(f"passed: {self.passed}")
        return "\n".join(lines) + "\n"


def _periodic_at(values: np.ndarray, x_src: np.ndarray, x_dst: np.ndarray) -> np.ndarray:
    return np.interp(x_dst, x_src, values, period=1.0)


def pipeline_verify_pde(cfg: ExperimentConfig, sigma, result: Optional[EnsembleResult] = None,
                        logger: RunLogger = None, verbose: bool = True) -> VerificationReport:
    """
    Compare ensemble heights with the corrected and the uncorrected PDE.

    Height increments E[h_N(t) - h_N(0)] are compared per site (no window)
    with h(t) - h0 from both PDEs; window means of w are compared with the
    staggered third difference of h. Passes when the corrected distance
    shrinks with N and beats the uncorrected one at the largest N.
    """
    logger = logger or RunLogger()
    family = getattr(sigma, "metadata", {}).get("initial_family")
    if family is not None and family == cfg.profile_family:
        raise ConfigurationError("verify with an initial profile different from the one sigma was fitted on")
    if result is None:
        result, _ = load_or_run_ensemble(cfg, verbose=verbose, logger=logger)
    G = cfg.pde.G
    profile = InitialProfile.named(cfg.profile_family, cfg.amplitude, G)
    h0 = PdeField(np.roll(profile.grid_values, 1))  # node j holds x = j/G
    times = [t for t in cfg.times]
    runs = {}
    for label, s in (("sigma", sigma), ("gibbs", ConstantSigma(1.0))):
        runs[label] = solve_h_pde(h0, s, cfg.K, times[-1], t_eval=times, rtol=cfg.pde.rtol, atol=cfg.pde.atol)
        logger.log_success(label, "solve_h_pde", f"G={G} t_end={times[-1]:.3g}")

    x_pde = np.arange(G) / G
    x_stag = x_pde + 0.5 / G
    d = cfg.delta_grid[0]
    eps = cfg.epsilon_grid[-1]
    dist = {"sigma": {}, "gibbs": {}}
    wdist = {"sigma": {}, "gibbs": {}}
    rows = []
    for N in sorted(cfg.N_values):
        x_sites = np.arange(1, N + 1) / N
        h_start = result.series(N, times[0], d, "h").mean
        for label in ("sigma", "gibbs"):
            traj = runs[label]
            gaps, wgaps = [0.0], [0.0]
            for k, t in enumerate(times[1:], start=1):
                kmc_inc = result.series(N, t, d, "h").mean - h_start
                pde_inc = _periodic_at(traj.values[k] - traj.values[0], x_pde, x_sites)
                gaps.append(float(np.max(np.abs(kmc_inc - pde_inc))))
                # site k of w is centered at x_{k+1/2}; shift lattice positions accordingly
                w_pde = _periodic_at(third_derivative(traj.values[k]), x_stag, x_sites + 0.5 / N)
                w_bar = result.series(N, t, d, "w", eps).mean
                wgaps.append(float(np.max(np.abs(w_bar - window_average_profile(w_pde, eps)))))
                rows.extend({"N": N, "t": t, "x": x, "solution": label, "kmc_increment": a, "pde_increment": b}
                            for x, a, b in zip(x_sites, kmc_inc, pde_inc))
            dist[label][N] = max(gaps)
            wdist[label][N] = max(wgaps)

    N_sorted = sorted(cfg.N_values)
    seq = [dist["sigma"][N] for N in N_sorted]
    decreasing = all(b <= a for a, b in zip(seq, seq[1:]))
    passed = bool(decreasing and dist["sigma"][N_sorted[-1]] < dist["gibbs"][N_sorted[-1]])
    report = VerificationReport(N_values=N_sorted, distance_sigma=dist["sigma"], distance_gibbs=dist["gibbs"],
                                w_distance_sigma=wdist["sigma"], w_distance_gibbs=wdist["gibbs"],
                                passed=passed, profiles=pd.DataFrame(rows))
    FileHandler.atomic_write_text(Path(cfg.output_dir) / "verify_pde.txt", report.to_text())
    logger.log_success(cfg.name, "verify_pde", f"passed={passed}")
    return report


# --- Figure data ---

FIGURE_SCHEMAS: Dict[str, Tuple[List[str], List[str]]] = {
    "init": (["ensemble"], ["N", "x", "h0", "mean_h", "variance_h"]),
    "E": (["ensemble"], ["N", "t", "epsilon", "x", "mean_w_bar"]),
    "V": (["ensemble"], ["N", "t", "epsilon", "var_w_bar"]),
    "Ef": (["ensemble"], ["N", "t", "epsilon", "omega", "J_bar", "w2_bar"]),
    "rough-profiles": (["ensemble"], ["N", "t", "x", "E_w", "E_J", "E_w2"]),
    "no-gibbs": (["gibbs_report"], ["i_over_N", "log_product", "stderr", "reference_12K"]),
    "sigma-sweep": (["selection_sweep"], ["epsilon", "delta", "n_points", "bias_vs_delta_min",
                                          "bias_vs_epsilon_min", "scatter", "selected"]),
    "sigma": (["sigma_curves"], ["K", "omega", "sigma"]),
    "pde-evolution": (["verification"], ["N", "t", "x", "solution", "kmc_increment", "pde_increment"]),
    "time-average": (["time_average"], ["N", "t", "delta", "sup_distance", "mean_distance"]),
}


def _figure_frame(figure_id: str, results: Mapping) -> pd.DataFrame:
    if figure_id == "no-gibbs":
        return results["gibbs_report"].profile_frame()
    if figure_id == "sigma-sweep":
        return results["selection_sweep"]
    if figure_id == "sigma":
        frames = []
        for K, curve in sorted(results["sigma_curves"].items()):
            W = curve.W if np.isfinite(curve.W) else 2.5
            omega = np.linspace(-1.2 * W, 1.2 * W, 481)
            frames.append(pd.DataFrame({"K": K, "omega": omega, "sigma": curve(omega)}))
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    if figure_id == "pde-evolution":
        return results["verification"].profiles
    if figure_id == "time-average":
        return results["time_average"].table

    ens: EnsembleResult = results["ensemble"]
    cfg = ens.config
    d = cfg.delta_grid[0]
    rows = []
    for N in sorted(cfg.N_values):
        x = np.arange(1, N + 1) / N
        if figure_id == "init":
            h0 = cfg.profile_for(N).grid_values
            # synthetic results carry no sampled initial state
            s = ens.initial_heights[N] if N in ens.initial_heights else ens.series(N, cfg.times[0], d, "h")
            rows.append(pd.DataFrame({"N": N, "x": x, "h0": h0, "mean_h": s.mean, "variance_h": s.variance}))
            continue
        for t in cfg.times:
            if figure_id == "rough-profiles":
                rows.append(pd.DataFrame({"N": N, "t": t, "x": x,
                                          "E_w": ens.series(N, t, d, "w").mean,
                                          "E_J": ens.series(N, t, d, "J").mean,
                                          "E_w2": ens.series(N, t, d, "w2").mean}))
                continue
            for eps in cfg.epsilon_grid:
                if 2 * N * eps < 1:
                    continue
                w_bar = ens.series(N, t, d, "w", eps)
                if figure_id == "E":
                    rows.append(pd.DataFrame({"N": N, "t": t, "epsilon": eps, "x": x, "mean_w_bar": w_bar.mean}))
                elif figure_id == "V":
                    rows.append(pd.DataFrame({"N": [N], "t": [t], "epsilon": [eps],
                                              "var_w_bar": [float(w_bar.variance.mean())]}))
                elif figure_id == "Ef":
                    rows.append(pd.DataFrame({"N": N, "t": t, "epsilon": eps, "omega": w_bar.mean,
                                              "J_bar": ens.series(N, t, d, "J", eps).mean,
                                              "w2_bar": ens.series(N, t, d, "w2", eps).mean}))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame()


def _render(figure_id: str, df: pd.DataFrame, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x_col, y_col = {
        "init": ("x", "mean_h"), "E": ("x", "mean_w_bar"), "V": ("N", "var_w_bar"),
        "Ef": ("omega", "J_bar"), "rough-profiles": ("x", "E_w"), "no-gibbs": ("i_over_N", "log_product"),
        "sigma-sweep": ("epsilon", "bias_vs_epsilon_min"), "sigma": ("omega", "sigma"),
        "pde-evolution": ("x", "kmc_increment"), "time-average": ("N", "sup_distance"),
    }[figure_id]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(df[x_col], df[y_col], ".", markersize=2)
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    ax.set_title(figure_id)
    fig.tight_layout()
    tmp = path.with_name(f".{path.name}.tmp.svg")
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    os.replace(tmp, path)


def emit_figure_data(results: Mapping, figure_id: str, output_dir, render: bool = False) -> List[Path]:
    """Write the tidy CSV of one figure (and optionally an SVG rendering)."""
    if figure_id not in FIGURE_SCHEMAS:
        raise ConfigurationError(f"unknown figure '{figure_id}', expected one of {sorted(FIGURE_SCHEMAS)}")
    required, columns = FIGURE_SCHEMAS[figure_id]
    missing = [name for name in required if results.get(name) is None]
    if missing:
        raise FigureDataError(figure_id, missing)
    df = _figure_frame(figure_id, results)
    if df is None or df.empty:
        raise FigureDataError(figure_id, [f"{name} (empty)" for name in required])
    df = df[columns]
    out = Path(output_dir) / "figures"
    csv_path = out / f"{figure_id}.csv"
    FileHandler.save_frame(df, csv_path)
    paths = [csv_path]
    if render:
        svg_path = out / f"{figure_id}.svg"
        _render(figure_id, df, svg_path)
        paths.append(svg_path)
    return paths
