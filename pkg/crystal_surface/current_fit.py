"""
Estimation of the current correction sigma(omega) = J_hat(omega) / J_gibbs(omega).

Flow: per-site time-averaged currents and window means are paired into a
point cloud, burn-in and the (epsilon, delta) operating point are checked on
binned medians, a quadratic core a + b*omega^2 is fitted near the origin in
the current scale, and a cubic smoothing spline through the ratio points and
the core fill-in gives the curve. Outside [-W, W] sigma is held constant.
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import CubicHermiteSpline, PPoly, make_smoothing_spline

from crystal_surface import config
from crystal_surface.errors import (
    ContractViolation,
    CoverageGapError,
    SelectionInconclusive,
    SigmaInvariantError,
    SingularFitError,
)
from crystal_surface.observables import MesoSeries

_MAD_SCALE = 1.4826
_SINGULAR_COND = 1e12


def j_gibbs(omega, K: float):
    """Local-Gibbs current 2 exp(-3K/2) sinh(K omega)."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    out = 2.0 * math.exp(-1.5 * K) * np.sinh(K * np.asarray(omega, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SigmaPointCloud:
    """
    Raw (omega, current) pairs with the ratio points derived from them.

    All pairs are retained for the quadratic core; ``points`` exposes only
    the ratio points with |omega| >= delta0, where dividing by J_gibbs is
    well conditioned.
    """

    omega: np.ndarray
    current: np.ndarray
    K: float
    delta0: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).ravel()
        self.current = np.asarray(self.current, dtype=np.float64).ravel()
        if self.omega.shape != self.current.shape:
            raise ContractViolation("omega and current must pair up one to one")
        keep = np.abs(self.omega) >= self.delta0
        ratios = self.current[keep] / j_gibbs(self.omega[keep], self.K)
        if not np.all(np.isfinite(ratios)):
            raise ContractViolation("point cloud contains non-finite ratios")
        self._keep = keep
        self._ratios = ratios

    @property
    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.omega[self._keep], self._ratios

    def __len__(self) -> int:
        return int(self._keep.sum())

    @property
    def omega_range(self) -> Tuple[float, float]:
        x, _ = self.points
        if not x.size:
            return (0.0, 0.0)
        return float(x.min()), float(x.max())

    def to_frame(self) -> pd.DataFrame:
        x, r = self.points
        return pd.DataFrame({"omega": x, "ratio": r})

    @classmethod
    def combine(cls, clouds: Iterable["SigmaPointCloud"]) -> "SigmaPointCloud":
        clouds = list(clouds)
        if not clouds:
            raise ContractViolation("nothing to combine")
        K, delta0 = clouds[0].K, clouds[0].delta0
        if any(c.K != K or c.delta0 != delta0 for c in clouds):
            raise ContractViolation("clouds differ in K or delta0")
        meta = dict(clouds[0].metadata)
        meta["t"] = [c.metadata.get("t") for c in clouds]
        return cls(np.concatenate([c.omega for c in clouds]),
                   np.concatenate([c.current for c in clouds]), K, delta0, meta)


def assemble_point_cloud(w_series: MesoSeries, J_series: MesoSeries, K: float,
                         delta0: float, seeds=None) -> SigmaPointCloud:
    """Pair window means omega(t, x) with per-site time-averaged currents at x."""
    if w_series.N != J_series.N:
        raise ContractViolation(f"lattice mismatch: {w_series.N} vs {J_series.N}")
    if w_series.t != J_series.t or w_series.delta != J_series.delta:
        raise ContractViolation(
            f"series disagree on (t, delta): ({w_series.t}, {w_series.delta}) vs ({J_series.t}, {J_series.delta})")
    if J_series.epsilon > 1.0 / (2 * J_series.N) + 1e-12:
        raise ContractViolation("the current series must be per-site (no spatial averaging)")
    meta = {"N": w_series.N, "K": K, "t": w_series.t, "epsilon": w_series.epsilon,
            "delta": w_series.delta, "seeds": seeds}
    return SigmaPointCloud(w_series.mean, J_series.mean, K, delta0, meta)


# --- Binned medians ---

def binned_median_curve(cloud: SigmaPointCloud, edges: np.ndarray,
                        min_count: int = config.BIN_MIN_COUNT) -> pd.DataFrame:
    """Median ratio and robust scatter (1.4826 MAD) per omega bin."""
    x, r = cloud.points
    frame = pd.DataFrame({"omega": x, "ratio": r})
    frame["bin"] = pd.cut(frame["omega"], bins=edges, labels=False, include_lowest=True)
    grouped = frame.dropna(subset=["bin"]).groupby("bin")["ratio"]
    stats = pd.DataFrame({
        "median": grouped.median(),
        "scatter": grouped.apply(lambda s: _MAD_SCALE * float(np.median(np.abs(s - s.median())))),
        "count": grouped.size(),
    })
    out = pd.DataFrame(index=pd.RangeIndex(edges.size - 1, name="bin"))
    out["center"] = 0.5 * (edges[:-1] + edges[1:])
    out = out.join(stats)
    out["count"] = out["count"].fillna(0).astype(int)
    sparse = out["count"] < min_count
    out.loc[sparse, ["median", "scatter"]] = np.nan
    return out.reset_index()


def _common_edges(clouds, n_bins: int) -> np.ndarray:
    ranges = [c.omega_range for c in clouds]
    lo = max(r[0] for r in ranges)
    hi = min(r[1] for r in ranges)
    if not hi > lo:
        raise ContractViolation(f"omega ranges do not overlap (common range [{lo}, {hi}])")
    return np.linspace(lo, hi, n_bins + 1)


def _curve_gap(a: pd.DataFrame, b: pd.DataFrame) -> float:
    both = a["median"].notna() & b["median"].notna()
    if not both.any():
        raise ContractViolation("binned curves share no populated bins")
    return float(np.max(np.abs(a.loc[both, "median"] - b.loc[both, "median"])))


def _scatter(curve: pd.DataFrame) -> float:
    values = curve["scatter"].dropna()
    return float(values.median()) if len(values) else float("inf")


@dataclass
class BurnInReport:
    distance: float
    scatter: float
    tolerance: float
    scatter_tolerance: float
    passed: bool

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.__dict__.items()) + "\n"


def burn_in_test(early: SigmaPointCloud, late: SigmaPointCloud,
                 tolerance: float = config.BURN_IN_TOL,
                 scatter_tolerance: float = config.BURN_IN_SCATTER_TOL,
                 n_bins: int = config.N_BINS) -> BurnInReport:
    """Do two clouds at t < t' lie on one curve? Compares binned medians."""
    edges = _common_edges([early, late], n_bins)
    a = binned_median_curve(early, edges)
    b = binned_median_curve(late, edges)
    distance = _curve_gap(a, b)
    scatter = max(_scatter(a), _scatter(b))
    return BurnInReport(distance=distance, scatter=scatter, tolerance=tolerance,
                        scatter_tolerance=scatter_tolerance,
                        passed=bool(distance < tolerance and scatter < scatter_tolerance))


@dataclass
class Selection:
    epsilon: float
    delta: float
    sweep: pd.DataFrame


def select_epsilon_delta(clouds: Mapping[Tuple[float, float], SigmaPointCloud],
                         bias_tolerance: float = config.SELECTION_BIAS_TOL,
                         noise_tolerance: float = config.SELECTION_NOISE_TOL,
                         n_bins: int = config.N_BINS) -> Selection:
    """
    Pick the operating point of the (epsilon, delta) sweep.

    delta* is the largest delta whose curve stays within ``bias_tolerance``
    of the smallest-delta curve at every epsilon. At delta*, epsilon* is the
    largest epsilon within ``bias_tolerance`` of the smallest-epsilon curve
    whose within-bin scatter is below ``noise_tolerance``.
    """
    eps_values = sorted({e for e, _ in clouds})
    delta_values = sorted({d for _, d in clouds})
    if len(eps_values) < 3 or len(delta_values) < 2:
        raise ContractViolation("selection needs at least 3 epsilon and 2 delta values")
    missing = [(e, d) for e in eps_values for d in delta_values if (e, d) not in clouds]
    if missing:
        raise ContractViolation(f"sweep grid is incomplete, missing {missing}")

    edges = _common_edges(clouds.values(), n_bins)
    curves = {key: binned_median_curve(cloud, edges) for key, cloud in clouds.items()}
    rows = []
    for e in eps_values:
        for d in delta_values:
            rows.append({
                "epsilon": e, "delta": d, "n_points": len(clouds[(e, d)]),
                "bias_vs_delta_min": _curve_gap(curves[(e, d)], curves[(e, delta_values[0])]),
                "bias_vs_epsilon_min": _curve_gap(curves[(e, d)], curves[(eps_values[0], d)]),
                "scatter": _scatter(curves[(e, d)]),
            })
    sweep = pd.DataFrame(rows)

    worst = sweep.groupby("delta")["bias_vs_delta_min"].max()
    delta_star = float(worst[worst <= bias_tolerance].index.max())
    at_delta = sweep[sweep["delta"] == delta_star]
    ok = at_delta[(at_delta["bias_vs_epsilon_min"] <= bias_tolerance)
                  & (at_delta["scatter"] <= noise_tolerance)]
    sweep["selected"] = False
    if ok.empty:
        raise SelectionInconclusive(
            f"no epsilon at delta={delta_star} meets bias {bias_tolerance} and noise {noise_tolerance}",
            sweep=sweep)
    eps_star = float(ok["epsilon"].max())
    sweep.loc[(sweep["epsilon"] == eps_star) & (sweep["delta"] == delta_star), "selected"] = True
    return Selection(epsilon=eps_star, delta=delta_star, sweep=sweep)


# --- Fitting ---

def fit_quadratic_core(cloud: SigmaPointCloud, delta1: float) -> Tuple[float, float]:
    """
    Least squares for J ~ (a + b omega^2) J_gibbs(omega) over |omega| < delta1.

    Solved in the current scale through the 2x2 normal equations, so points
    at omega = 0 contribute without dividing by J_gibbs.
    """
    if not delta1 > cloud.delta0:
        raise ContractViolation(f"delta1={delta1} must exceed delta0={cloud.delta0}")
    near = np.abs(cloud.omega) < delta1
    if near.sum() < 3:
        raise ContractViolation(f"quadratic core needs 3 points with |omega| < {delta1}, found {near.sum()}")
    x = cloud.omega[near]
    g1 = j_gibbs(x, cloud.K)
    g2 = x * x * g1
    A = np.array([[g1 @ g1, g1 @ g2], [g1 @ g2, g2 @ g2]])
    rhs = np.array([g1 @ cloud.current[near], g2 @ cloud.current[near]])
    if not np.isfinite(np.linalg.cond(A)) or np.linalg.cond(A) > _SINGULAR_COND:
        raise SingularFitError("normal equations are singular: omega values do not spread")
    a, b = np.linalg.solve(A, rhs)
    return float(a), float(b)


class ConstantSigma:
    """sigma identically equal to ``value`` (1 gives the local-Gibbs current)."""

    W = math.inf
    symmetrized = True

    def __init__(self, value: float = 1.0):
        if not value > 0:
            raise ContractViolation(f"constant sigma must be positive, got {value}")
        self.value = float(value)

    def __call__(self, omega):
        out = np.full(np.shape(omega), self.value)
        return float(out) if out.ndim == 0 else out

    def derivative(self, omega):
        out = np.zeros(np.shape(omega))
        return float(out) if out.ndim == 0 else out

    def __repr__(self):
        return f"ConstantSigma({self.value})"


@dataclass
class SigmaCurve:
    """Fitted sigma: C^1 piecewise cubic on [-W, W], constant outside."""

    K: float
    a: float
    b: float
    delta0: float
    delta1: float
    W: float
    knots: np.ndarray
    coefficients: np.ndarray
    sigma_left: float
    sigma_right: float
    smoothing_weight: float
    symmetrized: bool = False
    metadata: dict = field(default_factory=dict)

    @cached_property
    def _poly(self) -> PPoly:
        return PPoly(np.asarray(self.coefficients, dtype=np.float64),
                     np.asarray(self.knots, dtype=np.float64), extrapolate=True)

    @cached_property
    def _dpoly(self) -> PPoly:
        return self._poly.derivative()

    def __call__(self, omega):
        omega = np.asarray(omega, dtype=np.float64)
        inner = self._poly(np.clip(omega, -self.W, self.W))
        out = np.where(omega < -self.W, self.sigma_left, np.where(omega > self.W, self.sigma_right, inner))
        return float(out) if out.ndim == 0 else out

    def derivative(self, omega):
        omega = np.asarray(omega, dtype=np.float64)
        out = np.where(np.abs(omega) > self.W, 0.0, self._dpoly(np.clip(omega, -self.W, self.W)))
        return float(out) if out.ndim == 0 else out

    def nodal(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._poly(self.knots), self._dpoly(self.knots)

    def asymmetry(self, n: int = 401) -> float:
        grid = np.linspace(0.0, self.W * 1.1, n)
        return float(np.max(np.abs(self(grid) - self(-grid))))

    def monotonicity_defect(self, n: int = 401) -> float:
        """Largest drop of sigma along [0, W] (0 when nondecreasing)."""
        values = self(np.linspace(0.0, self.W, n))
        return float(max(0.0, -np.min(np.diff(values))))

    def to_text(self) -> str:
        header = {
            "format_version": config.SIGMA_FORMAT_VERSION,
            "K": self.K, "a": self.a, "b": self.b,
            "delta0": self.delta0, "delta1": self.delta1, "W": self.W,
            "sigma_left": self.sigma_left, "sigma_right": self.sigma_right,
            "smoothing_weight": self.smoothing_weight, "symmetrized": self.symmetrized,
            "metadata": self.metadata,
        }
        lines = ["# crystal_surface sigma curve"]
        lines += [f"{key}: {json.dumps(value, default=str)}" for key, value in header.items()]
        lines.append(f"[knots] {len(self.knots)}")
        lines += [repr(float(k)) for k in self.knots]
        lines.append(f"[coefficients] {self.coefficients.shape[0]} {self.coefficients.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in np.asarray(self.coefficients).T]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SigmaCurve":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        header = {}
        i = 0
        while not lines[i].startswith("[knots]"):
            key, _, value = lines[i].partition(":")
            header[key.strip()] = json.loads(value.strip())
            i += 1
        if header.get("format_version") != config.SIGMA_FORMAT_VERSION:
            raise ContractViolation(f"unsupported sigma format version {header.get('format_version')}")
        n_knots = int(lines[i].split()[1])
        knots = np.array([float(v) for v in lines[i + 1:i + 1 + n_knots]])
        i += 1 + n_knots
        order, n_pieces = (int(v) for v in lines[i].split()[1:3])
        rows = [[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n_pieces]]
        coefficients = np.array(rows).T.reshape(order, n_pieces)
        return cls(K=header["K"], a=header["a"], b=header["b"], delta0=header["delta0"],
                   delta1=header["delta1"], W=header["W"], knots=knots, coefficients=coefficients,
                   sigma_left=header["sigma_left"], sigma_right=header["sigma_right"],
                   smoothing_weight=header["smoothing_weight"], symmetrized=header["symmetrized"],
                   metadata=header.get("metadata") or {})


def _hermite_curve(template: SigmaCurve, knots, values, slopes, symmetrized: bool) -> SigmaCurve:
    slopes = np.array(slopes, dtype=np.float64)
    slopes[0] = slopes[-1] = 0.0
    poly = CubicHermiteSpline(knots, values, slopes)
    return SigmaCurve(K=template.K, a=template.a, b=template.b, delta0=template.delta0,
                      delta1=template.delta1, W=template.W, knots=np.asarray(knots),
                      coefficients=np.asarray(poly.c), sigma_left=float(values[0]),
                      sigma_right=float(values[-1]), smoothing_weight=template.smoothing_weight,
                      symmetrized=symmetrized, metadata=dict(template.metadata))


def symmetrize(curve: SigmaCurve) -> SigmaCurve:
    """sigma(omega) <- (sigma(omega) + sigma(-omega)) / 2 on symmetric knots."""
    knots = np.asarray(curve.knots)
    if not np.allclose(knots, -knots[::-1], atol=1e-12 * max(1.0, curve.W)):
        raise ContractViolation("symmetrization needs knots symmetric about 0")
    values, slopes = curve.nodal()
    return _hermite_curve(curve, knots, 0.5 * (values + values[::-1]),
                          0.5 * (slopes - slopes[::-1]), symmetrized=True)


def _aggregate(x, y, resolution: float):
    """Mean of y per omega cell of width ``resolution``; cell counts become spline weights."""
    cell = np.round(np.asarray(x) / resolution).astype(np.int64)
    frame = pd.DataFrame({"cell": cell, "y": y}).groupby("cell")["y"].agg(["mean", "size"])
    return (frame.index.to_numpy() * resolution, frame["mean"].to_numpy(),
            frame["size"].to_numpy(dtype=np.float64))


def check_sigma_invariants(curve, floor: float = config.SIGMA_FLOOR,
                           symmetry_tol: float = config.SIGMA_SYMMETRY_TOL, n: int = 801) -> list:
    """Names of violated curve invariants (empty when all hold)."""
    failures = []
    W = curve.W if np.isfinite(curve.W) else 1.0
    grid = np.linspace(-1.2 * W, 1.2 * W, n)
    values = curve(grid)
    if not np.all(np.isfinite(values)):
        failures.append("finite")
    elif float(values.min()) < floor:
        failures.append(f"positivity: min sigma {values.min():.4g} < floor {floor}")
    if float(np.max(np.abs(values - values[::-1]))) > symmetry_tol:
        failures.append(f"evenness: asymmetry exceeds {symmetry_tol}")
    if np.isfinite(curve.W):
        left, right = curve(np.array([-curve.W - 1e-12, -curve.W])), curve(np.array([curve.W, curve.W + 1e-12]))
        if abs(left[0] - left[1]) > 1e-8 or abs(right[0] - right[1]) > 1e-8:
            failures.append("continuity at +-W")
    return failures


def fit_sigma(cloud: SigmaPointCloud, core: Tuple[float, float], delta0: float, delta1: float,
              W: float, smoothing_weight: float = config.SMOOTHING_WEIGHT,
              symmetrize_curve: bool = config.SYMMETRIZE_SIGMA,
              n_knots: int = config.SIGMA_KNOTS) -> SigmaCurve:
    """
    Cubic smoothing spline through the ratio points and the quadratic fill-in.

    The objective is lambda * sum(residuals^2) + (1 - lambda) * int s''^2
    with lambda = ``smoothing_weight``. The fit is resampled as a C^1
    Hermite cubic on ``n_knots`` uniform knots with zero slope at +-W.

    Points are first pooled onto omega cells of width W / (4 * n_knots):
    near-coincident abscissae make the spline system singular.
    """
    if not 0 < smoothing_weight < 1:
        raise ContractViolation(f"smoothing weight must lie in (0, 1), got {smoothing_weight}")
    a, b = core
    x_ratio, y_ratio = cloud.points
    keep = (np.abs(x_ratio) > delta0) & (np.abs(x_ratio) <= W)
    x_fill = cloud.omega[np.abs(cloud.omega) < delta0]
    x = np.concatenate([x_ratio[keep], x_fill])
    y = np.concatenate([y_ratio[keep], a + b * x_fill ** 2])
    xs, ys, weights = _aggregate(x, y, W / (4 * n_knots))
    if xs.size < 5:
        raise CoverageGapError(f"only {xs.size} occupied omega cells inside [-{W}, {W}]")
    gaps = np.diff(np.concatenate(([-W], xs, [W])))
    if gaps.max() > W / 10:
        where = int(np.argmax(gaps))
        lo = -W if where == 0 else xs[where - 1]
        raise CoverageGapError(f"gap of {gaps.max():.4g} after omega={lo:.4g} exceeds W/10={W / 10:.4g}")

    lam = (1.0 - smoothing_weight) / smoothing_weight
    spline = make_smoothing_spline(xs, ys, w=weights, lam=lam)
    knots = np.linspace(-W, W, n_knots)
    values = spline(knots)
    slopes = spline.derivative()(knots)

    template = SigmaCurve(K=cloud.K, a=a, b=b, delta0=delta0, delta1=delta1, W=W,
                          knots=knots, coefficients=np.zeros((4, n_knots - 1)),
                          sigma_left=0.0, sigma_right=0.0, smoothing_weight=smoothing_weight,
                          metadata={**cloud.metadata, "n_points": int(xs.size)})
    curve = _hermite_curve(template, knots, values, slopes, symmetrized=False)
    curve.metadata["raw_asymmetry"] = curve.asymmetry()
    if symmetrize_curve:
        curve = symmetrize(curve)
    curve.metadata["monotonicity_defect"] = curve.monotonicity_defect()

    failures = check_sigma_invariants(curve)
    if failures:
        raise SigmaInvariantError(failures)
    return curve


def eval_sigma(curve, omega):
    return curve(omega)


def eval_J_hat(curve, omega, K: float):
    """J_hat = sigma * J_gibbs."""
    return curve(omega) * j_gibbs(omega, K)
