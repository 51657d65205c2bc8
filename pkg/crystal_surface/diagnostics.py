"""
Local-equilibrium diagnostics.

Convergence (E), variance decay (V), collapse of window-level statistics
(Ef), boundedness of w and J, rough/smooth classification of expectation
profiles, and the local-Gibbs falsification test built on the exact
product measure rho[lambda] with marginals proportional to
exp(-K (n - lambda)^2).

All verdicts are deterministic functions of their inputs.
"""

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from crystal_surface import config
from crystal_surface.errors import ContractViolation, SelectionInconclusive, ShapeMismatchError
from crystal_surface.observables import MesoSeries, window_average_profile


class _Report:
    """Key: value text rendering shared by every report."""

    def to_text(self) -> str:
        lines = [f"report: {type(self).__name__}"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, pd.DataFrame):
                continue
            if isinstance(value, np.ndarray):
                value = np.array2string(value, precision=6, separator=", ", max_line_width=10_000)
            elif isinstance(value, Enum):
                value = value.value
            elif isinstance(value, float):
                value = f"{value:.6g}"
            lines.append(f"{f.name}: {value}")
        return "\n".join(lines) + "\n"


def _slope(N_values, y) -> Tuple[float, float]:
    coeffs = np.polyfit(np.log(np.asarray(N_values, dtype=np.float64)),
                        np.log(np.asarray(y, dtype=np.float64)), 1)
    return float(coeffs[0]), float(coeffs[1])


def _periodic_resample(series: MesoSeries, x_grid: np.ndarray) -> np.ndarray:
    return np.interp(x_grid, series.x_grid, series.mean, period=1.0)


# --- (E) ---

@dataclass
class ConvergenceReport(_Report):
    N_values: np.ndarray
    distances: np.ndarray
    tolerance: float
    shrinking: bool
    converged: bool

    @property
    def passed(self) -> bool:
        return self.converged


def test_E_convergence(series: Sequence[MesoSeries], tolerance: float = config.E_CAUCHY_TOL
                       ) -> ConvergenceReport:
    """
    Cauchy test on window-averaged mean profiles at increasing N.

    Profiles are interpolated periodically onto the coarsest grid and the
    sup-norm distance between successive N is reported.
    """
    if len(series) < 3:
        raise ContractViolation("(E) test needs series at three or more values of N")
    ordered = sorted(series, key=lambda s: s.N)
    if any(s.N < 2 for s in ordered):
        raise ShapeMismatchError("each series needs at least two grid points")
    grid = ordered[0].x_grid
    profiles = [_periodic_resample(s, grid) for s in ordered]
    distances = np.array([np.max(np.abs(b - a)) for a, b in zip(profiles, profiles[1:])])
    return ConvergenceReport(
        N_values=np.array([s.N for s in ordered]),
        distances=distances,
        tolerance=tolerance,
        shrinking=bool(np.all(np.diff(distances) <= tolerance * 1e-3)) if distances.size > 1 else True,
        converged=bool(distances[-1] <= tolerance),
    )


# --- (V) ---

@dataclass
class DecayReport(_Report):
    N_values: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    threshold: float
    passed: bool


def test_V_decay(N_values, variances, zeta: float = config.V_SLOPE_ZETA) -> DecayReport:
    """Fit log Var against log N; pass when the slope is at most -zeta."""
    N_values = np.asarray(N_values, dtype=np.float64)
    variances = np.asarray([np.mean(v) for v in variances], dtype=np.float64)
    if N_values.size < 3:
        raise ContractViolation("(V) test needs three or more values of N")
    if N_values.shape != variances.shape:
        raise ShapeMismatchError("one variance per N is required")
    if np.any(variances <= 0):
        raise ContractViolation("variances must be positive for a log-log fit")
    slope, intercept = _slope(N_values, variances)
    return DecayReport(N_values=N_values, values=variances, slope=slope, intercept=intercept,
                       threshold=-zeta, passed=bool(slope <= -zeta))


# --- (Ef) ---

@dataclass
class CollapseReport(_Report):
    N_values: np.ndarray
    omega_range: Tuple[float, float]
    max_distance: float
    tolerance: float
    passed: bool
    curves: pd.DataFrame = field(repr=False, default=None)


def _binned_curve(omega, values, edges):
    idx = np.clip(np.digitize(omega, edges) - 1, 0, edges.size - 2)
    inside = (omega >= edges[0]) & (omega <= edges[-1])
    counts = np.bincount(idx[inside], minlength=edges.size - 1)
    sum_x = np.bincount(idx[inside], weights=omega[inside], minlength=edges.size - 1)
    sum_y = np.bincount(idx[inside], weights=values[inside], minlength=edges.size - 1)
    keep = counts > 0
    return sum_x[keep] / counts[keep], sum_y[keep] / counts[keep]


def test_Ef_collapse(points: Mapping[int, Tuple[np.ndarray, np.ndarray]],
                     tolerance: float = config.EF_COLLAPSE_TOL,
                     n_bins: int = config.N_BINS, n_eval: int = 200) -> CollapseReport:
    """
    Compare binned (omega, f-bar) curves across N on their common omega range.

    ``points`` maps N to the window means omega and window averages of f at
    the same windows. Each N gets a piecewise-linear curve through its bin
    means; the report holds the largest gap between any two curves.
    """
    if len(points) < 2:
        raise ContractViolation("(Ef) test needs two or more values of N")
    data = {N: (np.asarray(o, dtype=np.float64).ravel(), np.asarray(f, dtype=np.float64).ravel())
            for N, (o, f) in sorted(points.items())}
    lo = max(o.min() for o, _ in data.values())
    hi = min(o.max() for o, _ in data.values())
    if not hi > lo:
        raise ContractViolation(f"omega ranges do not overlap (common range [{lo}, {hi}])")
    edges = np.linspace(lo, hi, n_bins + 1)
    curves = {N: _binned_curve(o, f, edges) for N, (o, f) in data.items()}
    lo_eval = max(c[0][0] for c in curves.values())
    hi_eval = min(c[0][-1] for c in curves.values())
    if not hi_eval > lo_eval:
        raise ContractViolation("binned curves do not share an omega range")
    grid = np.linspace(lo_eval, hi_eval, n_eval)
    table = pd.DataFrame({"omega": grid})
    for N, (cx, cy) in curves.items():
        table[f"N={N}"] = np.interp(grid, cx, cy)
    values = table.drop(columns="omega").to_numpy()
    distance = float(np.max(values.max(axis=1) - values.min(axis=1)))
    return CollapseReport(N_values=np.array(list(curves)), omega_range=(float(lo_eval), float(hi_eval)),
                          max_distance=distance, tolerance=tolerance,
                          passed=bool(distance <= tolerance), curves=table)


# --- (w-bd), (J-bd) ---

@dataclass
class BoundednessReport(_Report):
    slopes_w: Dict[float, float]
    slopes_J: Dict[float, float]
    decreasing_in_t: Dict[int, bool]
    tolerance: float
    passed: bool
    table: pd.DataFrame = field(repr=False, default=None)


def test_boundedness(series: Mapping[Tuple[int, float], Tuple[np.ndarray, np.ndarray]],
                     slope_tolerance: float = config.BOUNDEDNESS_SLOPE_TOL) -> BoundednessReport:
    """
    Check that max_i E|w_i| and max_i |E J(w_i)| do not grow with N.

    ``series`` maps (N, t) to per-site (E[w^2], E[J(w)]). E|w_i| is bounded
    above by E[w_i^2]^(1/2), which is what is tracked.
    """
    rows = []
    for (N, t), (w2, J) in series.items():
        rows.append({"N": int(N), "t": float(t),
                     "max_w": float(np.sqrt(np.max(np.asarray(w2)))),
                     "max_J": float(np.max(np.abs(np.asarray(J))))})
    table = pd.DataFrame(rows).sort_values(["t", "N"]).reset_index(drop=True)
    if table["N"].nunique() < 3 or table["t"].nunique() < 3:
        raise ContractViolation("boundedness test needs three or more N and three or more times")
    slopes_w, slopes_J = {}, {}
    for t, group in table.groupby("t"):
        floor = np.finfo(float).tiny
        slopes_w[t] = _slope(group["N"], np.maximum(group["max_w"], floor))[0]
        slopes_J[t] = _slope(group["N"], np.maximum(group["max_J"], floor))[0]
    decreasing = {int(N): bool(np.all(np.diff(g.sort_values("t")["max_w"].to_numpy()) <= 0))
                  for N, g in table.groupby("N")}
    passed = all(s <= slope_tolerance for s in slopes_w.values()) and \
        all(s <= slope_tolerance for s in slopes_J.values())
    return BoundednessReport(slopes_w=slopes_w, slopes_J=slopes_J, decreasing_in_t=decreasing,
                             tolerance=slope_tolerance, passed=bool(passed), table=table)


# --- Roughness ---

class Roughness(str, Enum):
    SMOOTH = "smooth"
    ROUGH = "rough"
    INCONCLUSIVE = "inconclusive"


@dataclass
class RoughnessReport(_Report):
    metric: float
    N_values: np.ndarray
    per_N_metrics: np.ndarray
    verdict: Roughness

    @property
    def passed(self) -> bool:
        return self.verdict is not Roughness.INCONCLUSIVE


def _profile_metric(profile: np.ndarray, probe_x, radius: int) -> float:
    profile = np.asarray(profile, dtype=np.float64)
    N = profile.size
    if radius < 1:
        raise ContractViolation(f"radius must be >= 1, got {radius}")
    if 2 * radius + 2 > N:
        raise ContractViolation(f"neighbourhood of radius {radius} exceeds lattice of {N} sites")
    diffs = np.abs(np.roll(profile, -1) - profile)
    if probe_x is None:
        return float(diffs.max())
    best = 0.0
    for x in np.atleast_1d(probe_x):
        center = int(round(x * N)) - 1
        idx = np.arange(center - radius, center + radius + 1) % N
        best = max(best, float(diffs[idx].max()))
    return best


def roughness_metric(profiles: Union[np.ndarray, Mapping[int, np.ndarray]], probe_x=None,
                     radius: int = config.ROUGHNESS_RADIUS, noise_slack: float = 0.1) -> RoughnessReport:
    """
    Largest neighbour difference |E v_{i+1} - E v_i| around the probe points.

    Given profiles at several N the metric is tracked across N: a smooth
    profile loses its neighbour differences at least like N^(-1/2), a rough
    one keeps them (within ``noise_slack``).
    """
    if not isinstance(profiles, Mapping):
        profiles = {np.asarray(profiles).size: profiles}
    N_values = np.array(sorted(profiles))
    metrics = np.array([_profile_metric(profiles[N], probe_x, radius) for N in N_values])
    if metrics.size < 2:
        verdict = Roughness.INCONCLUSIVE
    elif metrics[0] == 0.0 or metrics[-1] <= metrics[0] * math.sqrt(N_values[0] / N_values[-1]):
        verdict = Roughness.SMOOTH
    elif np.all(metrics[1:] >= metrics[:-1] * (1.0 - noise_slack)):
        verdict = Roughness.ROUGH
    else:
        verdict = Roughness.INCONCLUSIVE
    return RoughnessReport(metric=float(metrics[-1]), N_values=N_values,
                           per_N_metrics=metrics, verdict=verdict)


def dyadic_epsilon_grid(N: int) -> np.ndarray:
    """Window half-widths 2^k / N (k >= 0) below 1/2."""
    grid = []
    k = 0
    while 2.0 ** k / N < 0.5:
        grid.append(2.0 ** k / N)
        k += 1
    return np.array(grid)


def select_epsilon_N(mean_profile, epsilon_grid=None,
                     threshold_fraction: float = config.SMOOTH_THRESHOLD_FRACTION) -> float:
    """
    Smallest epsilon whose window-averaged profile varies smoothly.

    Smooth means every neighbour difference of the averaged profile is below
    ``threshold_fraction`` times the range of the raw per-site profile.
    """
    profile = np.asarray(mean_profile, dtype=np.float64)
    grid = dyadic_epsilon_grid(profile.size) if epsilon_grid is None else np.sort(np.asarray(epsilon_grid))
    theta = threshold_fraction * float(np.ptp(profile))
    for eps in grid:
        averaged = window_average_profile(profile, eps)
        if float(np.max(np.abs(np.roll(averaged, -1) - averaged))) <= theta:
            return float(eps)
    raise SelectionInconclusive(f"no epsilon in {list(grid)} smooths the profile below {theta:.3g}")


# --- Local Gibbs analytics ---

def gibbs_truncation(K: float) -> int:
    """Half-width T of the index range |m - lambda| <= T keeping the tail below 1e-14."""
    return int(math.ceil(math.sqrt(33.0 / K))) + 2


def _support(lam: float, K: float) -> np.ndarray:
    T = gibbs_truncation(K)
    base = math.floor(lam)
    return np.arange(base - T, base + T + 2, dtype=np.float64)


def gibbs_Z(lam: float, K: float) -> float:
    """Z(lambda) = sum_m exp(-K (m - lambda)^2), 1-periodic in lambda."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    lam = float(lam) - math.floor(lam)
    m = _support(lam, K)
    return float(np.sum(np.exp(-K * (m - lam) ** 2)))


def gibbs_exp_moment(lam: float, c: float, K: float) -> float:
    """E exp(c K n) under rho[lambda] = exp(c^2 K/4 + c K lambda) Z(lambda + c/2) / Z(lambda)."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    if c == 0:
        return 1.0
    log_value = c * c * K / 4.0 + c * K * lam
    return math.exp(log_value) * gibbs_Z(lam + c / 2.0, K) / gibbs_Z(lam, K)


def gibbs_pmf(lam: float, K: float) -> Tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of rho[lambda] on the truncated range."""
    m = _support(lam, K)
    p = np.exp(-K * (m - lam) ** 2)
    return m.astype(np.int64), p / p.sum()


def gibbs_mean_slope(lam: float, K: float) -> float:
    """First moment of rho[lambda]."""
    m, p = gibbs_pmf(lam, K)
    return float(np.dot(m, p))


def gibbs_sample(lambdas, K: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws from the product measure; shape (size, len(lambdas))."""
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    u = rng.random((size, lambdas.size))
    out = np.empty((size, lambdas.size), dtype=np.int64)
    for j, lam in enumerate(lambdas):
        m, p = gibbs_pmf(lam, K)
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        out[:, j] = m[np.searchsorted(cdf, u[:, j], side="right").clip(0, m.size - 1)]
    return out


@dataclass
class GibbsReference(_Report):
    K: float
    lambda_grid: np.ndarray
    Z_values: np.ndarray
    truncation_bound: int
    periodicity_error: float

    @classmethod
    def build(cls, K: float, n_lambda: int = 101) -> "GibbsReference":
        grid = np.linspace(0.0, 1.0, n_lambda)
        Z = np.array([gibbs_Z(lam, K) for lam in grid])
        shifted = np.array([gibbs_Z(lam + 1.0, K) for lam in grid])
        return cls(K=K, lambda_grid=grid, Z_values=Z, truncation_bound=gibbs_truncation(K),
                   periodicity_error=float(np.max(np.abs(Z - shifted))))


@dataclass
class GibbsTestReport(_Report):
    K: float
    reference: float
    fraction_above: float
    fraction_below: float
    fraction_significant: float
    lower_bound_holds: bool
    verdict: str
    log_product: np.ndarray = field(repr=False, default=None)
    stderr: np.ndarray = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.verdict == "consistent-with-gibbs"

    def profile_frame(self) -> pd.DataFrame:
        N = self.log_product.size
        return pd.DataFrame({
            "i_over_N": np.arange(1, N + 1) / N,
            "log_product": self.log_product,
            "stderr": self.stderr,
            "reference_12K": self.reference,
        })


def _mean_and_se(estimate) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(estimate, MesoSeries):
        return estimate.mean, estimate.std_error
    mean, se = estimate
    return np.asarray(mean, dtype=np.float64), np.asarray(se, dtype=np.float64)


def local_gibbs_test(f_plus, f_minus, K: float,
                     n_sigma: float = config.GIBBS_SIGMA_MULTIPLE,
                     site_fraction: float = config.GIBBS_SITE_FRACTION) -> GibbsTestReport:
    """
    Compare log(E f+_i * E f-_i) against 12K site by site.

    Any product measure gives exactly 12K regardless of its lambda profile.
    Estimates are MesoSeries or (mean, standard error) pairs. The verdict is
    "not-local-gibbs" when more than ``site_fraction`` of sites differ from
    12K by more than ``n_sigma`` propagated standard errors.
    """
    mp, sp = _mean_and_se(f_plus)
    mm, sm = _mean_and_se(f_minus)
    if mp.shape != mm.shape:
        raise ShapeMismatchError("f+ and f- estimates must share a grid")
    if np.any(mp <= 0) or np.any(mm <= 0):
        raise ContractViolation("nonpositive exponential-moment estimates; increase the sample count")
    log_product = np.log(mp) + np.log(mm)
    stderr = np.sqrt((sp / mp) ** 2 + (sm / mm) ** 2)
    reference = 12.0 * K
    deviation = log_product - reference
    bound = n_sigma * stderr
    above = deviation > bound
    below = deviation < -bound
    significant = float(np.mean(above | below))
    return GibbsTestReport(
        K=K, reference=reference,
        fraction_above=float(np.mean(above)), fraction_below=float(np.mean(below)),
        fraction_significant=significant, lower_bound_holds=not bool(below.any()),
        verdict="not-local-gibbs" if significant > site_fraction else "consistent-with-gibbs",
        log_product=log_product, stderr=stderr,
    )


def f_pm_from_slopes(z: np.ndarray, K: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-site f+ and f- for slope samples with sites on the last axis."""
    z = np.asarray(z, dtype=np.float64)
    w = np.roll(z, 1, axis=-1) - 2.0 * z + np.roll(z, -1, axis=-1)
    return np.exp(2.0 * K * w), np.exp(-2.0 * K * w)
