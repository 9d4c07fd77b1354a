"""
Zero-noise limits of perturbed SDEs dX = b(X) dt + (1/n) dB
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from flowlab.core.config import settings
from flowlab.core.exceptions import GridError, HullExitError, HypothesisError
from flowlab.core.rng import stream_id_for
from flowlab.services.fields import DriftField
from flowlab.services.flow import Lattice, euler_displacements, interpolate
from flowlab.services.paths import (
    BrownianPath,
    IdentityCheck,
    grid_steps,
    local_time_gradient_integral,
    local_time_grid,
    local_time_identity_check,
    sample_path,
    uniform_edges,
)

logger = logging.getLogger(__name__)


def _as_lattice(x_grid: Union[Lattice, Sequence[float], np.ndarray]) -> Lattice:
    if isinstance(x_grid, Lattice):
        return x_grid
    axis = np.asarray(x_grid, dtype=float)
    if axis.ndim != 1 or len(axis) < 2 or np.any(np.diff(axis) <= 0):
        raise GridError("Initial lattice must be an increasing 1-d array or a Lattice")
    return Lattice(axes=(axis,))


def check_zero_noise_hypotheses(drift: DriftField) -> float:
    """Return the one-sided bound m > 0 or raise when the drift falls outside the theory."""
    if drift.one_sided_bound is None:
        raise HypothesisError(f"Drift '{drift.key}' has no one-sided bound", {"key": drift.key})
    if not drift.autonomous:
        raise HypothesisError(f"Drift '{drift.key}' must be autonomous", {"key": drift.key})
    if drift.d == 1 and not drift.monotone_decreasing:
        raise HypothesisError(f"Drift '{drift.key}' is not decreasing", {"key": drift.key})
    if drift.d > 1 and not drift.separable:
        raise HypothesisError(f"Drift '{drift.key}' is not componentwise", {"key": drift.key})
    return float(min(drift.one_sided_bound))


@dataclass(frozen=True)
class ZeroNoiseStudy:
    """Per-level trajectories X^{n,x} on a shared path and the extrapolated limit"""

    drift: DriftField
    lattice: Lattice
    times: np.ndarray
    dt: float
    levels: List[int]
    trajectories: np.ndarray  # (L, K + 1, P, d)
    limit: np.ndarray  # (K + 1, P, d)
    method: str
    path: BrownianPath

    @property
    def x_grid(self) -> np.ndarray:
        return self.lattice.points

    def level(self, n: int) -> np.ndarray:
        return self.trajectories[self.levels.index(n)]

    @property
    def extrapolation_gap(self) -> float:
        """Largest distance between the two finest levels."""
        if len(self.levels) < 2:
            return float("nan")
        return float(np.max(np.abs(self.trajectories[-1] - self.trajectories[-2])))


def _nondecreasing(field: np.ndarray, lattice: Lattice) -> bool:
    if lattice.d != 1:
        return True
    return bool(np.all(np.diff(field[..., 0], axis=1) >= 0.0))


def extrapolate(trajectories: np.ndarray, levels: Sequence[int], lattice: Lattice) -> Tuple[np.ndarray, str]:
    """Affine fit in 1/n through the two finest levels, or the finest level when the fit is unstable.

    The fit is unstable when it breaks monotonicity in x or, with a third level
    available, misses that level by more than the gap between the two finest.
    """
    finest = trajectories[-1]
    if len(levels) < 2:
        return finest, "finest"
    d1, d2 = 1.0 / levels[-2], 1.0 / levels[-1]
    coarse = trajectories[-2]
    fitted = (d1 * finest - d2 * coarse) / (d1 - d2)
    gap = float(np.max(np.abs(finest - coarse)))
    if len(levels) >= 3:
        d3 = 1.0 / levels[-3]
        slope = (coarse - finest) / (d1 - d2)
        miss = float(np.max(np.abs(fitted + slope * d3 - trajectories[-3])))
        if miss > gap:
            logger.info(f"Richardson fit misses level {levels[-3]} by {miss:.3e} > gap {gap:.3e}; using finest level")
            return finest, "finest"
    if not _nondecreasing(fitted, lattice):
        logger.info("Richardson fit is not monotone in x; using finest level")
        return finest, "finest"
    return fitted, "richardson"


def run_zero_noise(
    drift: DriftField,
    x_grid: Union[Lattice, Sequence[float], np.ndarray],
    T: float,
    dt: float,
    levels: Sequence[int],
    seed: Optional[int] = None,
    stream: int = 0,
    threads: Optional[int] = None,
) -> ZeroNoiseStudy:
    """Euler-Maruyama for every noise level 1/n on one path, then extrapolate n -> infinity."""
    check_zero_noise_hypotheses(drift)
    levels = sorted(int(n) for n in levels)
    if not levels or levels[0] < 1 or len(set(levels)) != len(levels):
        raise GridError("Noise levels must be distinct positive integers", {"levels": levels})
    lattice = _as_lattice(x_grid)
    if lattice.d != drift.d:
        raise GridError("Lattice and drift dimensions differ", {"lattice_d": lattice.d, "drift_d": drift.d})
    seed = settings.DEFAULT_SEED if seed is None else seed
    path = sample_path(seed, stream_id_for("zero_noise", stream), drift.d, T, dt)
    steps = grid_steps(T, dt)
    points = lattice.points

    def run(n: int) -> np.ndarray:
        disp = euler_displacements(drift, points, path.values[:, None, :] / n, 0, steps, 1, dt)
        return points[None] + disp

    with ThreadPoolExecutor(max_workers=threads or settings.THREADS) as pool:
        trajectories = np.stack(list(pool.map(run, levels)))
    limit, method = extrapolate(trajectories, levels, lattice)
    logger.info(f"Zero-noise study '{drift.key}' levels {levels}: limit by {method}")
    return ZeroNoiseStudy(
        drift=drift, lattice=lattice, times=dt * np.arange(steps + 1), dt=dt, levels=levels,
        trajectories=trajectories, limit=limit, method=method, path=path,
    )


def ode_residual(field: np.ndarray, drift: DriftField, dt: float) -> float:
    """max_k,x |X_k - x - sum_{j<k} b(X_j) dt| for a field (K + 1, P, d) on a uniform grid."""
    field = np.asarray(field, dtype=float)
    rates = drift.eval(0.0, field[:-1]) * dt
    integral = np.concatenate([np.zeros((1,) + field.shape[1:]), np.cumsum(rates, axis=0)])
    return float(np.max(np.abs(field - field[0] - integral)))


def deterministic_ode_oracle(drift: DriftField, x_grid, T: float, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free Euler solution on a (typically finer) grid: times and states (K + 1, P, d)."""
    points = _as_lattice(x_grid).points if not isinstance(x_grid, np.ndarray) or x_grid.ndim == 1 else x_grid
    steps = grid_steps(T, dt)
    disp = euler_displacements(drift, points, np.zeros((steps + 1, 1, drift.d)), 0, steps, 1, dt)
    return dt * np.arange(steps + 1), points[None] + disp


def oracle_error(study: ZeroNoiseStudy, refinement: int = 16) -> float:
    """max distance from the limit field to a deterministic solve with step dt / refinement."""
    _, fine = deterministic_ode_oracle(study.drift, study.x_grid, float(study.times[-1]), study.dt / refinement)
    return float(np.max(np.abs(fine[::refinement] - study.limit)))


@dataclass(frozen=True)
class ContractionReport:
    expansion_ratio: float
    group_deviation: float
    evaluated: int
    excluded: int


def contraction_and_group_check(
    study: ZeroNoiseStudy, time_pairs: Optional[Sequence[Tuple[float, float]]] = None
) -> ContractionReport:
    """Largest pairwise expansion of the limit flow and its deviation from the group law."""
    if not study.drift.autonomous:
        raise HypothesisError("Group check needs an autonomous drift", {"key": study.drift.key})
    field, x = study.limit, study.x_grid
    offsets = x[None, :, :] - x[:, None, :]
    distance = np.linalg.norm(offsets, axis=-1)
    upper = distance > 0
    ratio = 0.0
    for state in field:
        spread = np.linalg.norm(state[None, :, :] - state[:, None, :], axis=-1)
        ratio = max(ratio, float(np.max(spread[upper] / distance[upper])))

    horizon = float(study.times[-1])
    if time_pairs is None:
        quarter = study.dt * round(horizon / (4 * study.dt))
        time_pairs = [(quarter, quarter), (quarter, 2 * quarter), (2 * quarter, quarter)]
    worst, evaluated, excluded = 0.0, 0, 0
    for s, t in time_pairs:
        ks, kt, kst = (int(round(v / study.dt)) for v in (s, t, s + t))
        if kst >= len(study.times):
            raise GridError("Time pair exceeds the study horizon", {"s": s, "t": t, "horizon": horizon})
        # X_t evaluated at the points X_s^x
        composed = interpolate(study.lattice, field[kt], field[ks])
        error = np.linalg.norm(composed - field[kst], axis=-1)
        valid = np.isfinite(error)
        evaluated += int(valid.sum())
        excluded += int((~valid).sum())
        if valid.any():
            worst = max(worst, float(error[valid].max()))
    if excluded:
        logger.warning(f"Group check excluded {excluded} points outside the lattice hull")
    return ContractionReport(expansion_ratio=ratio, group_deviation=worst, evaluated=evaluated, excluded=excluded)


@dataclass(frozen=True)
class LocalTimeDerivative:
    """Spatial derivative of X^{n,x}_t from local time, the variational equation and finite differences"""

    representation: float
    finite_difference: float
    variational: Optional[float]
    bin_width: float
    truncated_fraction: float
    identity: Optional[IdentityCheck] = None


def local_time_derivative(
    drift: DriftField,
    n: int,
    path: BrownianPath,
    x: float,
    t: Optional[float] = None,
    bin_width: Optional[float] = None,
    fd_step: float = 0.01,
    window: Optional[Tuple[float, float]] = None,
    with_identity: bool = False,
) -> LocalTimeDerivative:
    """exp(-n^2 int int b(y) L(ds, dy)) for the perturbed trajectory from x.

    The space-time integral against local time is the summation-by-parts form
    of local_time_gradient_integral with quadratic-variation rate 1/n^2.
    """
    if drift.d != 1 or path.d != 1:
        raise HypothesisError("Local-time derivatives are one-dimensional", {"d": drift.d})
    delta = 1.0 / n
    bin_width = delta / 10.0 if bin_width is None else bin_width
    if bin_width > delta / 5.0 * (1 + 1e-12):
        raise GridError("Local-time bins must not exceed a fifth of the noise level", {"bin_width": bin_width, "delta": delta})
    t = path.horizon if t is None else t
    steps = path.index_of(t)
    starts = np.array([[x - fd_step], [x], [x + fd_step]])
    disp = euler_displacements(drift, starts, path.values[: steps + 1, None, :] * delta, 0, steps, 1, path.dt)
    trajectories = starts[None] + disp  # (K + 1, 3, 1)
    center = trajectories[:, 1, 0]

    if window is None:
        lo, hi = center.min() - 2 * bin_width, center.max() + 2 * bin_width
    else:
        lo, hi = window
    # a jump of b sits at a bin center so its cell sees both sides equally
    jump = drift.discontinuities[0][0] if drift.discontinuities else None
    edges = uniform_edges(lo, hi, bin_width, center_on=jump)
    ltg = local_time_grid(center, edges, dt=path.dt, diffusion=delta**2)
    if window is not None and ltg.truncated_fraction > 0.0:
        raise HullExitError(
            "Trajectory left the local-time window", {"window": list(window), "truncated": ltg.truncated_fraction}
        )

    integral = local_time_gradient_integral(ltg, lambda s, y: drift.eval(0.0, y[..., None])[..., 0])
    representation = float(np.exp(-(n**2) * integral))
    finite_difference = float((trajectories[-1, 2, 0] - trajectories[-1, 0, 0]) / (2.0 * fd_step))
    variational = None
    if drift.smooth:
        slopes = drift.eval_jacobian(0.0, center[:-1, None])[:, 0, 0]
        variational = float(np.exp(np.sum(slopes) * path.dt))
    identity = None
    if with_identity:
        identity = local_time_identity_check(path, drift, x, delta, bin_width, t)
    logger.debug(
        f"Local-time derivative n={n}, x={x}: representation {representation:.5f}, "
        f"finite difference {finite_difference:.5f}, variational {variational}"
    )
    return LocalTimeDerivative(
        representation=representation, finite_difference=finite_difference, variational=variational,
        bin_width=bin_width, truncated_fraction=ltg.truncated_fraction, identity=identity,
    )


@dataclass(frozen=True)
class W12Study:
    """Per level (and the limit, last row) of int_0^T ||X_t||^2_{W^{1,2}(U)} dt and its parts"""

    labels: List[str]
    value_parts: np.ndarray
    derivative_parts: np.ndarray
    interval: Tuple[float, float]
    measure: float

    @property
    def totals(self) -> np.ndarray:
        return self.value_parts + self.derivative_parts

    def uniform(self, band: Optional[float] = None) -> bool:
        band = settings.UNIFORMITY_BAND if band is None else band
        levels = self.totals[:-1]
        return bool(levels.max() <= band * levels.min())


def w12_norm_study(study: ZeroNoiseStudy, interval: Tuple[float, float]) -> W12Study:
    """Lattice quadrature of X^2 + (dX/dx)^2 over U, trapezoid in time."""
    if study.lattice.d != 1:
        raise HypothesisError("W^{1,2} studies are one-dimensional")
    axis = study.lattice.axes[0]
    h = study.lattice.spacing[0]
    a, b = interval
    if axis[0] > a - h or axis[-1] < b + h:
        raise GridError("Lattice must cover the interval with a margin of one cell", {"interval": list(interval)})
    inside = (axis >= a) & (axis <= b)
    count = int(inside.sum())
    labels = [f"n={n}" for n in study.levels] + ["limit"]
    fields = list(study.trajectories) + [study.limit]
    values, derivatives = [], []
    for field in fields:
        states = field[..., 0]
        slope = np.gradient(states, h, axis=1)
        values.append(integrate.trapezoid(np.sum(states[:, inside] ** 2, axis=1) * h, study.times))
        derivatives.append(integrate.trapezoid(np.sum(slope[:, inside] ** 2, axis=1) * h, study.times))
    return W12Study(
        labels=labels, value_parts=np.array(values), derivative_parts=np.array(derivatives),
        interval=(a, b), measure=count * h,
    )


@dataclass(frozen=True)
class SeedIndependence:
    difference: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.difference <= self.tolerance


def seed_independence(
    drift: DriftField,
    x_grid,
    T: float,
    dt: float,
    levels: Sequence[int],
    streams: Tuple[int, int] = (0, 1),
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> SeedIndependence:
    """Two disjoint noise streams must give the same limit up to their extrapolation gaps."""
    first = run_zero_noise(drift, x_grid, T, dt, levels, seed=seed, stream=streams[0], threads=threads)
    second = run_zero_noise(drift, x_grid, T, dt, levels, seed=seed, stream=streams[1], threads=threads)
    difference = float(np.max(np.abs(first.limit - second.limit)))
    tolerance = first.extrapolation_gap + second.extrapolation_gap + 1e-12
    return SeedIndependence(difference=difference, tolerance=tolerance)


@dataclass(frozen=True)
class CrossingReport:
    """Slowest speed along the drift's sign minus m, and the most crossings of any threshold"""

    speed_margin: float
    max_crossings: int
    thresholds: List[float]


def crossing_check(study: ZeroNoiseStudy, lag: Optional[float] = None) -> CrossingReport:
    """One-sided speed bound and single-crossing property of the limit field."""
    m = check_zero_noise_hypotheses(study.drift)
    sign = np.asarray(study.drift.one_sided_sign, dtype=float)
    k = max(1, int(round((lag if lag is not None else 10 * study.dt) / study.dt)))
    advance = (study.limit[k:] - study.limit[:-k]) * sign
    speed_margin = float(np.min(advance) / (k * study.dt) - m)
    thresholds: List[float] = []
    crossings = 0
    for axis, cuts in enumerate(study.drift.breakpoints or ()):
        for c in cuts:
            thresholds.append(float(c))
            side = (study.limit[..., axis] >= c).astype(int)
            changes = np.sum(np.diff(side, axis=0) != 0, axis=0)
            crossings = max(crossings, int(changes.max()))
    return CrossingReport(speed_margin=speed_margin, max_crossings=crossings, thresholds=thresholds)


def summary(study: ZeroNoiseStudy, interval: Optional[Tuple[float, float]] = None) -> Dict[str, object]:
    """JSON-ready digest of a study."""
    report = contraction_and_group_check(study)
    out: Dict[str, object] = {
        "levels": study.levels,
        "method": study.method,
        "residuals": {"limit": ode_residual(study.limit, study.drift, study.dt)},
        "ratios": {"expansion": report.expansion_ratio, "group_deviation": report.group_deviation},
    }
    if interval is not None:
        w12 = w12_norm_study(study, interval)
        out["w12_norms"] = dict(zip(w12.labels, w12.totals.tolist()))
    return out
