"""
Exact continuous-time simulation of the crystal surface jump process.

A particle on top of column i hops to i+1 (``Direction.RIGHT``) or a particle
on top of column i+1 hops to i (``Direction.LEFT``). Every bond carries both
moves, so a lattice of N sites has 2N candidate events. Their rates live in
the leaves of a complete binary sum tree: selection and the <=10 leaf updates
a jump triggers are O(log N) each. The hot loop is JIT-compiled with numba and
releases the GIL so replicate ensembles run on a thread pool.

Time convention: the kernel draws unscaled waiting times T ~ Exp(R) and the
macroscopic clock advances by T / N**4.
"""

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit

from crystal_surface import config
from crystal_surface.errors import (
    ConfigurationError,
    ContractViolation,
    ModelError,
    RateSaturationError,
)
from crystal_surface.observables import PathRecorder, SnapshotRecorder, WindowRecorder

__all__ = [
    "RateFamily",
    "Direction",
    "ModelParams",
    "InitialProfile",
    "SurfaceState",
    "JumpEvent",
    "site_positions",
    "replicate_rng",
    "metropolis_rates",
    "arrhenius_rates",
    "sample_initial_state",
    "kmc_step",
    "run_until",
    "hamiltonian",
    "detailed_balance_residual",
]

_METROPOLIS = 0
_ARRHENIUS = 1

# kernel status codes
_DONE = 0
_NEED_UNIFORMS = 1
_SATURATED = 2
_ZERO_RATE = 3


class RateFamily(str, Enum):
    METROPOLIS = "metropolis"
    ARRHENIUS = "arrhenius"


class Direction(IntEnum):
    RIGHT = 0  # h -> h^{i,i+1}
    LEFT = 1   # h -> h^{i+1,i}


@dataclass(frozen=True)
class ModelParams:
    """Model constants: inverse temperature, lattice size and rate family."""

    K: float
    N: int
    rate_family: RateFamily = RateFamily.METROPOLIS
    time_scale_exponent: int = config.TIME_SCALE_EXPONENT
    amplitude_exponent: int = config.HEIGHT_AMPLITUDE_EXPONENT

    def __post_init__(self):
        object.__setattr__(self, "rate_family", RateFamily(self.rate_family))
        if not self.K > 0:
            raise ConfigurationError(f"K must be positive, got {self.K}")
        if int(self.N) != self.N or self.N < config.MIN_LATTICE_SIZE:
            raise ConfigurationError(f"N must be an integer >= {config.MIN_LATTICE_SIZE}, got {self.N}")
        if self.time_scale_exponent != config.TIME_SCALE_EXPONENT:
            raise ConfigurationError("time_scale_exponent is fixed at 4 for both rate families")
        if self.amplitude_exponent not in (0, 3):
            raise ConfigurationError("amplitude_exponent must be 3 (heights) or 0 (w)")

    @property
    def time_scale(self) -> float:
        return float(self.N) ** self.time_scale_exponent

    @property
    def family_code(self) -> int:
        return _METROPOLIS if self.rate_family is RateFamily.METROPOLIS else _ARRHENIUS


@dataclass(frozen=True)
class JumpEvent:
    bond_index: int
    direction: Direction
    waiting_time: float  # unscaled, ~ Exp(total_rate)


def site_positions(N: int) -> np.ndarray:
    """Macroscopic positions of sites 1..N; array index k holds site k+1."""
    return np.arange(1, N + 1, dtype=np.float64) / N


_PROFILE_FAMILIES = {
    "zero": lambda c: (lambda x: np.zeros_like(np.asarray(x, dtype=np.float64))),
    "sin": lambda c: (lambda x: c * np.sin(2 * np.pi * np.asarray(x))),
    "exp-sin": lambda c: (lambda x: c * (1.0 - np.exp(-np.sin(2 * np.pi * np.asarray(x))))),
    "sin2": lambda c: (lambda x: c * np.sin(2 * np.pi * np.asarray(x)) ** 2),
}


@dataclass
class InitialProfile:
    """Macroscopic height profile h0 sampled on the lattice positions."""

    h0: Callable[[np.ndarray], np.ndarray]
    grid_values: np.ndarray
    mass_target: float
    family: str = "custom"
    amplitude: float = float("nan")

    def __post_init__(self):
        self.grid_values = np.asarray(self.grid_values, dtype=np.float64)

    @classmethod
    def from_function(cls, h0, N: int, family: str = "custom", amplitude: float = float("nan")):
        values = np.asarray(h0(site_positions(N)), dtype=np.float64)
        return cls(h0=h0, grid_values=values, mass_target=float(values.mean()),
                   family=family, amplitude=amplitude)

    @classmethod
    def named(cls, family: str, amplitude: float, N: int):
        """One of the reference initial conditions: sin, exp-sin, sin2 (or zero)."""
        if family not in _PROFILE_FAMILIES:
            raise ConfigurationError(
                f"unknown profile family '{family}', expected one of {sorted(_PROFILE_FAMILIES)}")
        return cls.from_function(_PROFILE_FAMILIES[family](amplitude), N, family, amplitude)


def replicate_rng(master_seed: int, index: Optional[int] = None,
                  lattice: Optional[int] = None) -> np.random.Generator:
    """Counter-based stream keyed by (master seed, [lattice size,] replicate index)."""
    key = tuple(int(k) for k in (lattice, index) if k is not None)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


# --- Scalar rate functions ---

def _check_saturation(K: float, w: float):
    if abs(K * w) > config.SATURATION_LIMIT:
        raise RateSaturationError(K, w)


def metropolis_rates(w: int, K: float) -> Tuple[float, float]:
    """(r_plus, r_minus) = (exp(-3K + K w), exp(-3K - K w))."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    _check_saturation(K, w)
    return math.exp(-3.0 * K + K * w), math.exp(-3.0 * K - K * w)


def arrhenius_rates(w2: int, K: float) -> Tuple[float, float]:
    """Symmetric rates (r_left, r_right) = exp(-2K - 2K w2), w2 the discrete Laplacian."""
    if not K > 0:
        raise ContractViolation(f"K must be positive, got {K}")
    _check_saturation(2.0 * K, w2)
    r = math.exp(-2.0 * K - 2.0 * K * w2)
    return r, r


# --- Compiled kernels ---

@njit(cache=True, nogil=True)
def _leaf_pair(family, K, z, w, bond, N):
    """Rates (right, left) at a bond plus a saturation flag."""
    if family == _METROPOLIS:
        x = K * w[bond]
        if abs(x) > 700.0:
            return 0.0, 0.0, False
        return math.exp(-3.0 * K + x), math.exp(-3.0 * K - x), True
    lap_i = z[bond] - z[(bond - 1) % N]
    lap_j = z[(bond + 1) % N] - z[bond]
    if abs(2.0 * K * lap_i) > 700.0 or abs(2.0 * K * lap_j) > 700.0:
        return 0.0, 0.0, False
    return math.exp(-2.0 * K - 2.0 * K * lap_i), math.exp(-2.0 * K - 2.0 * K * lap_j), True


@njit(cache=True, nogil=True)
def _tree_set(tree, size, leaf, value):
    k = size + leaf
    tree[k] = value
    k //= 2
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k //= 2


@njit(cache=True, nogil=True)
def _tree_select(tree, size, n_leaves, u):
    target = u * tree[1]
    k = 1
    while k < size:
        left = tree[2 * k]
        if target < left:
            k = 2 * k
        else:
            target -= left
            k = 2 * k + 1
    leaf = k - size
    if leaf >= n_leaves:
        leaf = n_leaves - 1
    return leaf


@njit(cache=True, nogil=True)
def _tree_fill(tree, size, family, K, z, w):
    N = z.shape[0]
    tree[:] = 0.0
    for b in range(N):
        rr, rl, ok = _leaf_pair(family, K, z, w, b, N)
        if not ok:
            return False
        tree[size + 2 * b] = rr
        tree[size + 2 * b + 1] = rl
    for k in range(size - 1, 0, -1):
        tree[k] = tree[2 * k] + tree[2 * k + 1]
    return True


@njit(cache=True, nogil=True)
def _flush_site(k_site, value_w, t_now, K, win_start, win_end, acc, last, row_lo, row_hi):
    """Add the held value of site k_site over [last, t_now] to every window."""
    t0 = last[k_site]
    if t_now <= t0:
        return
    ex = math.exp(K * value_w) if row_hi > 1 else 1.0
    for m in range(win_start.shape[0]):
        lo = max(t0, win_start[m])
        hi = min(t_now, win_end[m])
        if hi <= lo:
            continue
        span = hi - lo
        if row_lo == 0:
            acc[m, 0, k_site] += value_w * span
            acc[m, 1, k_site] += value_w * value_w * span
            acc[m, 2, k_site] += 2.0 * math.exp(-3.0 * K) * 0.5 * (ex - 1.0 / ex) * span
            acc[m, 3, k_site] += ex * ex * span
            acc[m, 4, k_site] += span / (ex * ex)
        else:
            acc[m, 5, k_site] += value_w * span
    last[k_site] = t_now


@njit(cache=True, nogil=True)
def _apply_jump(h, z, w, tree, size, family, K, bond, direction):
    N = h.shape[0]
    sign = 1 if direction == 0 else -1
    h[bond] -= sign
    h[(bond + 1) % N] += sign
    z[(bond - 1) % N] -= sign
    z[bond] += 2 * sign
    z[(bond + 1) % N] -= sign
    w[(bond - 2) % N] -= sign
    w[(bond - 1) % N] += 4 * sign
    w[bond] -= 6 * sign
    w[(bond + 1) % N] += 4 * sign
    w[(bond + 2) % N] -= sign
    for off in range(-2, 3):
        b = (bond + off) % N
        rr, rl, ok = _leaf_pair(family, K, z, w, b, N)
        if not ok:
            return False
        _tree_set(tree, size, 2 * b, rr)
        _tree_set(tree, size, 2 * b + 1, rl)
    return True


@njit(cache=True, nogil=True)
def _advance(h, z, w, tree, size, family, K, inv_n4, t, t_end, uniforms,
             ev_times, ev_bonds, ev_dirs, win_start, win_end, acc, last_w, last_h):
    N = h.shape[0]
    n_leaves = 2 * N
    n_pairs = uniforms.shape[0] // 2
    n_used = 0
    n_events = 0
    recording = win_start.shape[0] > 0
    status = _NEED_UNIFORMS
    while n_used < n_pairs:
        R = tree[1]
        if not R > 0.0:
            status = _ZERO_RATE
            break
        u1 = uniforms[2 * n_used]
        u2 = uniforms[2 * n_used + 1]
        n_used += 1
        dt = -math.log(u1) / R * inv_n4
        if t + dt > t_end:
            t = t_end
            status = _DONE
            break
        t = t + dt
        leaf = _tree_select(tree, size, n_leaves, u2)
        bond = leaf // 2
        direction = leaf % 2
        if recording:
            for off in range(-2, 3):
                s = (bond + off) % N
                _flush_site(s, w[s], t, K, win_start, win_end, acc, last_w, 0, 5)
            _flush_site(bond, h[bond], t, K, win_start, win_end, acc, last_h, 5, 1)
            s = (bond + 1) % N
            _flush_site(s, h[s], t, K, win_start, win_end, acc, last_h, 5, 1)
        ok = _apply_jump(h, z, w, tree, size, family, K, bond, direction)
        ev_times[n_events] = t
        ev_bonds[n_events] = bond
        ev_dirs[n_events] = direction
        n_events += 1
        if not ok:
            status = _SATURATED
            break
    return t, n_used, n_events, status


@njit(cache=True, nogil=True)
def _flush_all(h, w, t_now, K, win_start, win_end, acc, last_w, last_h):
    for s in range(h.shape[0]):
        _flush_site(s, w[s], t_now, K, win_start, win_end, acc, last_w, 0, 5)
        _flush_site(s, h[s], t_now, K, win_start, win_end, acc, last_h, 5, 1)


# --- State ---

def _derived(heights: np.ndarray):
    z = np.roll(heights, -1) - heights
    w = np.roll(z, 1) - 2 * z + np.roll(z, -1)
    return z, w


class SurfaceState:
    """
    Height profile on the periodic lattice with its cached slopes, third
    differences and bond rates.

    ``bond_rates[2*i]`` is the rate of the RIGHT move across bond (i, i+1)
    and ``bond_rates[2*i+1]`` the LEFT move. Rates are unscaled; the N**4
    time scaling enters only through the clock.
    """

    def __init__(self, heights, params: ModelParams, sim_time: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        heights = np.asarray(heights)
        if heights.shape != (params.N,):
            raise ContractViolation(f"heights must have shape ({params.N},), got {heights.shape}")
        self.params = params
        self.heights = heights.astype(np.int64).copy()
        self.slopes, self.third_diffs = _derived(self.heights)
        self._size = 1
        while self._size < 2 * params.N:
            self._size *= 2
        self._tree = np.zeros(2 * self._size, dtype=np.float64)
        self.sim_time = float(sim_time)
        self.rng = rng
        if not _tree_fill(self._tree, self._size, params.family_code, float(params.K),
                          self.slopes, self.third_diffs):
            raise RateSaturationError(params.K, int(np.abs(self.third_diffs).max()))

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def bond_rates(self) -> np.ndarray:
        return self._tree[self._size:self._size + 2 * self.N].copy()

    @property
    def total_rate(self) -> float:
        return float(self._tree[1])

    @property
    def mass(self) -> int:
        return int(self.heights.sum())

    def copy(self) -> "SurfaceState":
        clone = SurfaceState.__new__(SurfaceState)
        clone.params = self.params
        clone.heights = self.heights.copy()
        clone.slopes = self.slopes.copy()
        clone.third_diffs = self.third_diffs.copy()
        clone._size = self._size
        clone._tree = self._tree.copy()
        clone.sim_time = self.sim_time
        clone.rng = None
        return clone

    def consistency_error(self) -> dict:
        """Compare the incremental caches against a full recompute from heights."""
        z, w = _derived(self.heights)
        fresh = np.zeros_like(self._tree)
        _tree_fill(fresh, self._size, self.params.family_code, float(self.params.K), z, w)
        leaves = slice(self._size, self._size + 2 * self.N)
        rate_scale = np.maximum(np.abs(fresh[leaves]), np.finfo(float).tiny)
        return {
            "slope_mismatches": int(np.count_nonzero(z != self.slopes)),
            "third_diff_mismatches": int(np.count_nonzero(w != self.third_diffs)),
            "rate_rel_error": float(np.max(np.abs(self._tree[leaves] - fresh[leaves]) / rate_scale)),
            "total_rate_rel_error": abs(self.total_rate - float(fresh[leaves].sum())) / float(fresh[leaves].sum()),
            "slope_sum": int(self.slopes.sum()),
            "third_diff_sum": int(self.third_diffs.sum()),
        }

    def verify(self):
        """Raise ModelError when the caches drifted from the heights."""
        report = self.consistency_error()
        if (report["slope_mismatches"] or report["third_diff_mismatches"]
                or report["slope_sum"] or report["third_diff_sum"]
                or report["rate_rel_error"] > config.RATE_RECOMPUTE_TOL
                or report["total_rate_rel_error"] > config.RATE_RECOMPUTE_TOL):
            raise ModelError(f"cache drift detected: {report}")
        return report


def sample_initial_state(profile: InitialProfile, params: ModelParams,
                         seed: Union[int, np.random.Generator]) -> SurfaceState:
    """
    Draw h_i = floor(N^3 h0(x_i)) + xi_i with xi_i ~ Bernoulli(frac(N^3 h0(x_i))).

    The returned state owns its random stream, so the same seed always
    reproduces the same state and the same trajectory.
    """
    values = np.asarray(profile.grid_values, dtype=np.float64)
    if values.shape != (params.N,):
        raise ContractViolation(f"profile has {values.size} grid values, lattice has N={params.N}")
    if not np.all(np.isfinite(values)):
        raise ContractViolation("profile grid values must be finite")
    rng = seed if isinstance(seed, np.random.Generator) else replicate_rng(seed)
    scaled = values * float(params.N) ** params.amplitude_exponent
    base = np.floor(scaled)
    xi = rng.random(params.N) < (scaled - base)
    heights = base.astype(np.int64) + xi.astype(np.int64)
    return SurfaceState(heights, params, sim_time=0.0, rng=rng)


def _rng_for(state: SurfaceState, rng) -> np.random.Generator:
    rng = rng if rng is not None else state.rng
    if rng is None:
        raise ContractViolation("state has no random stream; pass rng explicitly")
    return rng


def _raise_status(state: SurfaceState, status: int):
    if status == _SATURATED:
        raise RateSaturationError(state.params.K, int(np.abs(state.third_diffs).max()))
    if status == _ZERO_RATE:
        raise ModelError("total rate underflowed to zero")


_NO_WINDOWS = np.zeros(0, dtype=np.float64)
_NO_ACC = np.zeros((0, 6, 1), dtype=np.float64)


def kmc_step(state: SurfaceState, rng: Optional[np.random.Generator] = None) -> JumpEvent:
    """Perform exactly one jump and return it."""
    rng = _rng_for(state, rng)
    R = state.total_rate
    if not R > 0:
        raise ModelError("total rate underflowed to zero")
    u1, u2 = 1.0 - rng.random(2)
    waiting = -math.log(u1) / R
    leaf = _tree_select(state._tree, state._size, 2 * state.N, u2)
    bond, direction = leaf // 2, leaf % 2
    ok = _apply_jump(state.heights, state.slopes, state.third_diffs, state._tree, state._size,
                     state.params.family_code, float(state.params.K), bond, direction)
    state.sim_time += waiting / state.params.time_scale
    if not ok:
        _raise_status(state, _SATURATED)
    return JumpEvent(bond_index=int(bond), direction=Direction(int(direction)), waiting_time=waiting)


def run_until(state: SurfaceState, t_end: float, recorders: Sequence = (),
              rng: Optional[np.random.Generator] = None,
              chunk_events: int = config.KMC_CHUNK_EVENTS) -> int:
    """
    Advance ``state`` to macroscopic time ``t_end`` and feed the recorders.

    The pending jump that would cross t_end is discarded and the clock is set
    to t_end exactly; by memorylessness of the exponential clock this leaves
    the law of the path unchanged and makes the state at t_end the value held
    on the last step. Returns the number of jumps performed.
    """
    t_end = float(t_end)
    if t_end < state.sim_time:
        raise ContractViolation(f"t_end={t_end} precedes current time {state.sim_time}")
    rng = _rng_for(state, rng)
    t0 = state.sim_time
    for rec in recorders:
        if rec.t_start < t0 or rec.t_end > t_end:
            raise ConfigurationError(
                f"recorder window [{rec.t_start}, {rec.t_end}] outside run span [{t0}, {t_end}]")

    K = float(state.params.K)
    windows = [r for r in recorders if isinstance(r, WindowRecorder)]
    paths = [r for r in recorders if isinstance(r, PathRecorder)]
    snapshots = [r for r in recorders if isinstance(r, SnapshotRecorder)]
    if paths and state.N > config.PATH_RECORDER_MAX_N:
        raise ConfigurationError(f"full-path recording is limited to N <= {config.PATH_RECORDER_MAX_N}")

    if windows:
        win_start = np.array([r.t_start for r in windows], dtype=np.float64)
        win_end = np.array([r.t_end for r in windows], dtype=np.float64)
        acc = np.zeros((len(windows), 6, state.N), dtype=np.float64)
    else:
        win_start, win_end, acc = _NO_WINDOWS, _NO_WINDOWS, _NO_ACC
    last_w = np.full(state.N, t0)
    last_h = np.full(state.N, t0)

    breakpoints = sorted({t_end} | {r.t_start for r in recorders} | {r.t_end for r in recorders})
    ev_times = np.empty(chunk_events, dtype=np.float64)
    ev_bonds = np.empty(chunk_events, dtype=np.int64)
    ev_dirs = np.empty(chunk_events, dtype=np.int64)
    n_jumps = 0

    def _touch(t_now):
        for rec in snapshots:
            if rec.t_start == t_now and not rec.done:
                rec.capture(state.heights, state.third_diffs, K)
        for rec in paths:
            if rec.t_start == t_now and not rec.started:
                rec.begin(state.heights, state.third_diffs, K)

    _touch(state.sim_time)
    for bp in breakpoints:
        while state.sim_time < bp:
            uniforms = 1.0 - rng.random(2 * chunk_events)
            t, _, n_ev, status = _advance(
                state.heights, state.slopes, state.third_diffs, state._tree, state._size,
                state.params.family_code, K, 1.0 / state.params.time_scale,
                state.sim_time, bp, uniforms, ev_times, ev_bonds, ev_dirs,
                win_start, win_end, acc, last_w, last_h)
            state.sim_time = t
            n_jumps += n_ev
            for rec in paths:
                rec.consume(ev_times[:n_ev], ev_bonds[:n_ev], ev_dirs[:n_ev], state.N)
            if status not in (_DONE, _NEED_UNIFORMS):
                _raise_status(state, status)
        _touch(bp)

    if windows:
        _flush_all(state.heights, state.third_diffs, state.sim_time, K,
                   win_start, win_end, acc, last_w, last_h)
        for m, rec in enumerate(windows):
            rec.finish(acc[m])
    for rec in paths:
        rec.close()
    return n_jumps


# --- Reversibility checks ---

def hamiltonian(z) -> int:
    """H(z) = sum_i z_i^2."""
    z = np.asarray(z, dtype=np.int64)
    return int(np.dot(z, z))


def _python_leaf_pair(z, bond, K, family: RateFamily):
    N = z.size
    if family is RateFamily.METROPOLIS:
        w = z[(bond - 1) % N] - 2 * z[bond] + z[(bond + 1) % N]
        return -3.0 * K + K * w, -3.0 * K - K * w
    lap_i = z[bond] - z[(bond - 1) % N]
    lap_j = z[(bond + 1) % N] - z[bond]
    return -2.0 * K - 2.0 * K * lap_i, -2.0 * K - 2.0 * K * lap_j


def detailed_balance_residual(z, bond: int, K: float,
                              family: RateFamily = RateFamily.METROPOLIS) -> float:
    """
    Relative mismatch of r^{i,i+1}(z) e^{-K H(z)} against
    r^{i+1,i}(z') e^{-K H(z')} with z' the slope profile after the RIGHT move.
    Computed in log space with the energy change taken as an exact integer,
    so large heights neither underflow nor cancel.
    """
    z = np.asarray(z, dtype=np.int64)
    N = z.size
    moved = z.copy()
    moved[(bond - 1) % N] -= 1
    moved[bond] += 2
    moved[(bond + 1) % N] -= 1
    log_fwd, _ = _python_leaf_pair(z, bond, K, RateFamily(family))
    _, log_back = _python_leaf_pair(moved, bond, K, RateFamily(family))
    energy_change = hamiltonian(moved) - hamiltonian(z)
    return abs(math.expm1(log_fwd - log_back + K * energy_change))
