"""
Estimators of h, z, w observables: exact path time averages, periodic
window averages, ensemble means with mergeable variances, and the streaming
recorders the simulation feeds while it runs.
"""

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d

from crystal_surface import config
from crystal_surface.errors import ContractViolation, RateSaturationError, ShapeMismatchError

# Row order of per-site observable blocks produced by recorders.
OBSERVABLES = ("w", "w2", "J", "f_plus", "f_minus", "h")
MESO_COLUMNS = ["x", "t", "epsilon", "delta", "mean", "variance", "n_samples"]

_D4 = np.array([1, -4, 6, -4, 1], dtype=np.int64)


def observable_J(w, K: float):
    """Microscopic current J(w) = r+ - r- = 2 exp(-3K) sinh(K w)."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    arr = np.asarray(w, dtype=np.float64)
    if arr.size and np.max(np.abs(K * arr)) > config.SATURATION_LIMIT:
        raise RateSaturationError(K, float(np.max(np.abs(arr))))
    out = 2.0 * np.exp(-3.0 * K) * np.sinh(K * arr)
    return float(out) if out.ndim == 0 else out


def observable_f_pm(z_triplet, K: float, sign: int):
    """f+- = exp(+-2K (z_{i-1} - 2 z_i + z_{i+1}))."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    if sign not in (1, -1):
        raise ContractViolation(f"sign must be +1 or -1, got {sign}")
    z_prev, z_mid, z_next = z_triplet
    w = z_prev - 2 * z_mid + z_next
    if abs(2.0 * K * w) > config.SATURATION_LIMIT:
        raise RateSaturationError(2.0 * K, w)
    return math.exp(sign * 2.0 * K * w)


def _apply_observable(name: str, w_or_h: np.ndarray, K: float) -> np.ndarray:
    v = np.asarray(w_or_h, dtype=np.float64)
    if name in ("w", "h"):
        return v
    if name == "w2":
        return v * v
    if name == "J":
        return 2.0 * np.exp(-3.0 * K) * np.sinh(K * v)
    if name == "f_plus":
        return np.exp(2.0 * K * v)
    if name == "f_minus":
        return np.exp(-2.0 * K * v)
    raise ContractViolation(f"unknown observable '{name}', expected one of {OBSERVABLES}")


def site_observables(heights: np.ndarray, third_diffs: np.ndarray, K: float) -> np.ndarray:
    """Instantaneous per-site values, shape (6, N) in OBSERVABLES order."""
    w = np.asarray(third_diffs, dtype=np.float64)
    out = np.empty((len(OBSERVABLES), w.size), dtype=np.float64)
    for row, name in enumerate(OBSERVABLES[:-1]):
        out[row] = _apply_observable(name, w, K)
    out[-1] = np.asarray(heights, dtype=np.float64)
    return out


# --- Paths ---

@dataclass
class StepPath:
    """Piecewise-constant trajectory: values[k] holds on [times[k-1], times[k])."""

    times: np.ndarray
    values: np.ndarray
    window: Tuple[float, float]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        t0, t1 = self.window
        if self.values.size != self.times.size + 1:
            raise ContractViolation(
                f"path has {self.times.size} jumps but {self.values.size} values")
        if self.times.size:
            if np.any(np.diff(self.times) <= 0):
                raise ContractViolation("path jump times must be strictly increasing")
            if self.times[0] < t0 or self.times[-1] > t1:
                raise ContractViolation("path jump times must lie inside the window")

    @property
    def length(self) -> float:
        return float(self.window[1] - self.window[0])

    def value_at(self, t) -> np.ndarray:
        """Right-continuous evaluation of the step function."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return self.values[idx]


def path_time_average(path: StepPath, f: Optional[Callable] = None) -> float:
    """Exact (1/Delta) * integral of f(path) over the path window."""
    if not path.length > 0:
        raise ContractViolation("time average needs a window of positive length")
    edges = np.concatenate(([path.window[0]], path.times, [path.window[1]]))
    values = path.values if f is None else np.asarray(f(path.values), dtype=np.float64)
    return float(np.dot(values, np.diff(edges)) / path.length)


# --- Spatial windows ---

def window_average(values, x: float, epsilon: float) -> float:
    """Mean over sites i with periodic distance |i/N - x| <= epsilon."""
    values = np.asarray(values, dtype=np.float64)
    N = values.size
    if epsilon >= 0.5:
        return float(values.mean())
    if 2 * N * epsilon < 1 - 1e-12:
        raise ContractViolation(f"window half-width {epsilon} is below one lattice spacing (N={N})")
    positions = np.arange(1, N + 1, dtype=np.float64) / N
    d = np.mod(positions - x, 1.0)
    mask = np.minimum(d, 1.0 - d) <= epsilon + 1e-12
    if not mask.any():
        raise ContractViolation(f"window around x={x} with epsilon={epsilon} contains no sites")
    return float(values[mask].mean())


def window_half_sites(N: int, epsilon: float) -> int:
    """Number m of neighbours on each side inside an epsilon window."""
    return int(math.floor(epsilon * N + 1e-9))


def window_average_profile(values, epsilon: float, axis: int = -1) -> np.ndarray:
    """
    Window averages centered on every lattice site at once.

    Equals window_average(values, i/N, epsilon) for every site i. Works along
    ``axis`` so a stack of replicates is averaged in one call.
    """
    values = np.asarray(values, dtype=np.float64)
    N = values.shape[axis]
    if epsilon >= 0.5:
        return np.broadcast_to(values.mean(axis=axis, keepdims=True), values.shape).copy()
    m = window_half_sites(N, epsilon)
    if m < 0 or 2 * N * epsilon < 1 - 1e-12:
        raise ContractViolation(f"window half-width {epsilon} is below one lattice spacing (N={N})")
    if 2 * m + 1 >= N:
        return np.broadcast_to(values.mean(axis=axis, keepdims=True), values.shape).copy()
    return uniform_filter1d(values, size=2 * m + 1, axis=axis, mode="wrap")


# --- Ensembles ---

class EnsembleAccumulator:
    """
    Streaming mean/variance over replicate arrays.

    Partial accumulators merge exactly (Chan et al. pairwise update), so the
    result does not depend on how replicates were grouped across workers.
    """

    def __init__(self, shape=None):
        self.count = 0
        self.shape = None if shape is None else tuple(shape)
        self.mean = None if shape is None else np.zeros(shape)
        self.m2 = None if shape is None else np.zeros(shape)
        self._lock = threading.Lock()

    def _check_shape(self, shape):
        if self.shape is None:
            self.shape = tuple(shape)
            self.mean = np.zeros(shape)
            self.m2 = np.zeros(shape)
        elif tuple(shape) != self.shape:
            raise ShapeMismatchError(f"replicate shape {tuple(shape)} does not match {self.shape}")

    def add(self, values) -> "EnsembleAccumulator":
        values = np.asarray(values, dtype=np.float64)
        with self._lock:
            self._check_shape(values.shape)
            self.count += 1
            delta = values - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (values - self.mean)
        return self

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        if other.count == 0:
            return self
        with self._lock:
            if self.count == 0:
                self.shape = other.shape
                self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
                return self
            self._check_shape(other.shape)
            n = self.count + other.count
            delta = other.mean - self.mean
            self.mean = self.mean + delta * (other.count / n)
            self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
            self.count = n
        return self

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.full(self.shape, np.nan)
        return np.maximum(self.m2 / (self.count - 1), 0.0)


@dataclass
class MesoSeries:
    """Per-site or window-averaged estimates at one (t, epsilon, delta)."""

    x_grid: np.ndarray
    t: float
    epsilon: float
    delta: float
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    observable: str = "w"

    def __post_init__(self):
        self.x_grid = np.asarray(self.x_grid, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if not 0 < self.epsilon <= 0.5:
            raise ContractViolation(f"epsilon must lie in (0, 1/2], got {self.epsilon}")
        if self.delta < 0:
            raise ContractViolation(f"delta must be >= 0, got {self.delta}")
        if not (self.x_grid.shape == self.mean.shape == self.variance.shape):
            raise ShapeMismatchError("x_grid, mean and variance must share one shape")
        if np.any(self.variance < 0):
            raise ContractViolation("variance must be nonnegative")

    @property
    def N(self) -> int:
        return int(self.x_grid.size)

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n_samples)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "x": self.x_grid,
            "t": self.t,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "mean": self.mean,
            "variance": self.variance,
            "n_samples": self.n_samples,
        }, columns=MESO_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, observable: str = "w") -> "MesoSeries":
        missing = [c for c in MESO_COLUMNS if c not in df.columns]
        if missing:
            raise ContractViolation(f"MesoSeries frame is missing columns {missing}")
        return cls(
            x_grid=df["x"].to_numpy(),
            t=float(df["t"].iloc[0]),
            epsilon=float(df["epsilon"].iloc[0]),
            delta=float(df["delta"].iloc[0]),
            mean=df["mean"].to_numpy(),
            variance=df["variance"].fillna(0.0).to_numpy(),
            n_samples=int(df["n_samples"].iloc[0]),
            observable=observable,
        )


def ensemble_estimate(replicate_results: Iterable, reduce: str = "mean_and_variance",
                      t: float = 0.0, epsilon: Optional[float] = None, delta: float = 0.0,
                      observable: str = "w") -> MesoSeries:
    """
    Aggregate per-replicate profiles (arrays of length N or accumulators).

    ``reduce="mean"`` skips the variance and accepts a single replicate.
    """
    if reduce not in ("mean", "mean_and_variance"):
        raise ContractViolation(f"unknown reduction '{reduce}'")
    acc = EnsembleAccumulator()
    for item in replicate_results:
        if isinstance(item, EnsembleAccumulator):
            acc.merge(item)
        else:
            acc.add(item)
    if acc.count == 0:
        raise ContractViolation("no replicate results to aggregate")
    if reduce == "mean_and_variance" and acc.count < 2:
        raise ContractViolation("variance needs at least two replicates")
    if len(acc.shape) != 1:
        raise ShapeMismatchError(f"expected 1-D site profiles, got shape {acc.shape}")
    N = acc.shape[0]
    eps = 1.0 / (2 * N) if epsilon is None else float(epsilon)
    variance = acc.variance if reduce == "mean_and_variance" else np.zeros(N)
    return MesoSeries(
        x_grid=np.arange(1, N + 1, dtype=np.float64) / N,
        t=float(t), epsilon=min(eps, 0.5), delta=float(delta),
        mean=acc.mean.copy(), variance=np.nan_to_num(variance), n_samples=acc.count,
        observable=observable,
    )


# --- Recorders fed by the simulation ---

class Recorder:
    t_start: float
    t_end: float


class SnapshotRecorder(Recorder):
    """Per-site observable values at one instant."""

    def __init__(self, t: float):
        self.t_start = self.t_end = float(t)
        self.values: Optional[np.ndarray] = None

    @property
    def done(self) -> bool:
        return self.values is not None

    def capture(self, heights, third_diffs, K: float):
        self.values = site_observables(heights, third_diffs, K)


class WindowRecorder(Recorder):
    """
    Exact time averages of every observable over [t_start, t_end], per site.

    The simulation kernel integrates each site's held value between its own
    jumps, so the result is the integral of the step path, not a sample.
    """

    def __init__(self, t_start: float, t_end: float):
        if not t_end > t_start:
            raise ContractViolation("window recorder needs t_end > t_start; use SnapshotRecorder for an instant")
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.values: Optional[np.ndarray] = None

    @property
    def done(self) -> bool:
        return self.values is not None

    def finish(self, integrals: np.ndarray):
        self.values = np.asarray(integrals, dtype=np.float64) / (self.t_end - self.t_start)


def make_recorder(t: float, delta: float) -> Recorder:
    """Recorder for I_{t,delta} = [t, t + delta]; delta = 0 means instantaneous."""
    if delta < 0:
        raise ContractViolation(f"delta must be >= 0, got {delta}")
    return SnapshotRecorder(t) if delta == 0 else WindowRecorder(t, t + delta)


class PathRecorder(Recorder):
    """Full step path of one site's observable; for small debug lattices."""

    def __init__(self, site: int, t_start: float, t_end: float, observable: str = "w"):
        if observable not in OBSERVABLES:
            raise ContractViolation(f"unknown observable '{observable}', expected one of {OBSERVABLES}")
        self.site = int(site)
        self.observable = observable
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.started = False
        self.K = None
        self._times: List[np.ndarray] = []
        self._values: List[np.ndarray] = []
        self._current = 0
        self._initial = 0
        self.path: Optional[StepPath] = None

    def begin(self, heights, third_diffs, K: float):
        self.K = K
        source = heights if self.observable == "h" else third_diffs
        self._current = int(source[self.site])
        self._initial = self._current
        self.started = True

    def consume(self, times, bonds, dirs, N: int):
        if not self.started or not len(times):
            return
        keep = (times > self.t_start) & (times <= self.t_end)
        times, bonds, dirs = times[keep], bonds[keep], dirs[keep]
        if not times.size:
            return
        sign = np.where(dirs == 0, 1, -1)
        if self.observable == "h":
            change = np.where(bonds == self.site, -sign, 0) + np.where((bonds + 1) % N == self.site, sign, 0)
        else:
            offset = (self.site - bonds + 2) % N
            inside = offset < 5
            change = np.where(inside, -sign * _D4[np.minimum(offset, 4)], 0)
        moved = change != 0
        if not moved.any():
            return
        steps = self._current + np.cumsum(change[moved])
        self._times.append(times[moved].copy())
        self._values.append(steps)
        self._current = int(steps[-1])

    def close(self):
        if not self.started:
            return
        times = np.concatenate(self._times) if self._times else np.zeros(0)
        raw = [np.array([self._initial])] + self._values
        values = np.concatenate(raw).astype(np.float64)
        self.path = StepPath(times=times, values=_apply_observable(self.observable, values, self.K),
                             window=(self.t_start, self.t_end))



@dataclass
class TimeAveragingReport:
    table: pd.DataFrame
    decreasing_in_N: bool
    delta_sensitivity: dict

    def to_text(self) -> str:
        lines = [f"decreasing_in_N: {self.decreasing_in_N}"]
        for N, value in sorted(self.delta_sensitivity.items()):
            lines.append(f"delta_sensitivity[N={N}]: {value:.6g}")
        return "\n".join(lines)


def compare_time_averaging(pairs: Sequence[Tuple[MesoSeries, MesoSeries]]) -> TimeAveragingReport:
    """
    Monitor the gap between instantaneous and time-averaged estimates.

    Each pair holds (instantaneous, time-averaged) series at the same N and
    t. The gap should shrink with N at fixed small delta, and halving delta
    should barely move the averaged estimate. Both are reported, not asserted.
    """
    rows = []
    averaged = {}
    for inst, avg in pairs:
        if inst.mean.shape != avg.mean.shape:
            raise ShapeMismatchError("paired series must share a grid")
        gap = np.abs(inst.mean - avg.mean)
        rows.append({"N": inst.N, "t": inst.t, "delta": avg.delta,
                     "sup_distance": float(gap.max()), "mean_distance": float(gap.mean())})
        averaged.setdefault(inst.N, []).append(avg)
    table = pd.DataFrame(rows, columns=["N", "t", "delta", "sup_distance", "mean_distance"])
    if table.empty:
        raise ContractViolation("no series pairs to compare")

    smallest = table.sort_values("delta").groupby("N", sort=True).first()
    gaps = smallest["sup_distance"].to_numpy()
    decreasing = bool(len(gaps) < 2 or np.all(np.diff(gaps) <= 0))

    sensitivity = {}
    for N, series in averaged.items():
        series = sorted(series, key=lambda s: s.delta)
        if len(series) >= 2:
            sensitivity[N] = float(np.max(np.abs(series[0].mean - series[1].mean)))
    return TimeAveragingReport(table=table, decreasing_in_N=decreasing, delta_sensitivity=sensitivity)
