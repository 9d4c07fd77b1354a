"""
Two-parameter flows phi_{s,t} driven by one shared Brownian path
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from flowlab.core.config import settings
from flowlab.core.exceptions import EstimationError, GridError, HorizonError, HypothesisError
from flowlab.core.rng import stream_id_for
from flowlab.services.fields import DriftField, lamperti_transform
from flowlab.services.paths import BrownianPath, PathEnsemble, grid_steps, sample_ensemble, wiener_shift

logger = logging.getLogger(__name__)

ENSEMBLE_CHUNK = 1024


@dataclass(frozen=True)
class Lattice:
    """Regular tensor lattice of initial points, flattened in 'ij' order."""

    axes: Tuple[np.ndarray, ...]

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple(float(a[1] - a[0]) if len(a) > 1 else 0.0 for a in self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        inside = np.ones(points.shape[:-1], dtype=bool)
        for i, axis in enumerate(self.axes):
            inside &= (points[..., i] >= axis[0]) & (points[..., i] <= axis[-1])
        return inside


def make_lattice(lo: Union[float, Sequence[float]], hi: Union[float, Sequence[float]], count: Union[int, Sequence[int]], d: int = 1) -> Lattice:
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,))
    count = np.broadcast_to(np.asarray(count, dtype=int), (d,))
    if np.any(count < 1) or np.any(hi < lo):
        raise GridError("Lattice needs hi >= lo and at least one point per axis", {"lo": lo.tolist(), "hi": hi.tolist()})
    return Lattice(axes=tuple(np.linspace(a, b, int(n)) for a, b, n in zip(lo, hi, count)))


def interpolate(lattice: Lattice, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of lattice values at points; NaN outside the hull.

    Each stage uses a + lam * (b - a), which reproduces constant fields exactly.
    """
    values = np.asarray(values, dtype=float).reshape(lattice.shape + (-1,))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lower, lam = [], []
    for i, axis in enumerate(lattice.axes):
        if len(axis) < 2:
            raise GridError("Interpolation needs two points per axis", {"axis": i})
        k = np.clip(np.searchsorted(axis, points[:, i], side="right") - 1, 0, len(axis) - 2)
        lower.append(k)
        lam.append((points[:, i] - axis[k]) / (axis[k + 1] - axis[k]))
    corners = {}
    for bits in itertools.product((0, 1), repeat=lattice.d):
        index = tuple(k + b for k, b in zip(lower, bits))
        corners[bits] = values[index]
    for i in reversed(range(lattice.d)):
        reduced = {}
        for bits in itertools.product((0, 1), repeat=i):
            a, b = corners[bits + (0,)], corners[bits + (1,)]
            reduced[bits] = a + lam[i][:, None] * (b - a)
        corners = reduced
    out = corners[()]
    out[~lattice.contains(points)] = np.nan
    return out


def euler_displacements(
    drift: DriftField,
    x0: np.ndarray,
    path_values: np.ndarray,
    start_index: int,
    steps: int,
    direction: int,
    dt: float,
    t0: float = 0.0,
    record: Optional[Sequence[int]] = None,
    with_jacobian: bool = False,
):
    """Euler-Maruyama in displacement form D = X - x0.

    D_{k+1} = D_k + b(t_k, x0 + D_k) * (direction * dt) + (B_{k +- 1} - B_k).
    `path_values` has time on axis 0 and broadcasts against x0. Returns the
    displacements (and Jacobians) after each step count in `record`.
    """
    record = list(range(steps + 1)) if record is None else sorted(set(record))
    step_size = direction * dt
    shape = np.broadcast_shapes(np.shape(x0), path_values.shape[1:])
    disp = np.zeros(shape)
    jac = np.broadcast_to(np.eye(drift.d), shape + (drift.d,)).copy() if with_jacobian else None
    kept_disp, kept_jac = [], []
    wanted = set(record)
    if 0 in wanted:
        kept_disp.append(disp.copy())
        if with_jacobian:
            kept_jac.append(jac.copy())
    index = start_index
    for j in range(steps):
        t = t0 + index * dt
        state = x0 + disp
        if with_jacobian:
            jac = jac + np.matmul(drift.eval_jacobian(t, state), jac) * step_size
        nxt = index + direction
        disp = disp + drift.eval(t, state) * step_size + (path_values[nxt] - path_values[index])
        index = nxt
        if j + 1 in wanted:
            kept_disp.append(disp.copy())
            if with_jacobian:
                kept_jac.append(jac.copy())
    disp_out = np.stack(kept_disp)
    if with_jacobian:
        return disp_out, np.stack(kept_jac)
    return disp_out


@dataclass(frozen=True)
class FlowField:
    """Discrete phi_{s,t}(x) for a set of initial points and one path."""

    drift: DriftField
    path: BrownianPath
    s: float
    direction: int
    dt: float
    times: np.ndarray
    x_grid: np.ndarray
    displacement: np.ndarray
    lattice: Optional[Lattice] = None

    @property
    def states(self) -> np.ndarray:
        return self.x_grid[None] + self.displacement

    def index_of(self, t: float) -> int:
        k = int(round((t - self.s) / (self.direction * self.dt)))
        if k < 0 or k >= len(self.times) or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise GridError("Time not on the flow grid", {"t": t, "s": self.s})
        return k

    def displacement_at(self, t: float) -> np.ndarray:
        return self.displacement[self.index_of(t)]

    def state_at(self, t: float) -> np.ndarray:
        return self.x_grid + self.displacement_at(t)


def _points(x_grid: Union[Lattice, np.ndarray], d: int) -> Tuple[np.ndarray, Optional[Lattice]]:
    if isinstance(x_grid, Lattice):
        return x_grid.points, x_grid
    points = np.asarray(x_grid, dtype=float)
    if points.ndim == 1:
        points = points[:, None] if d == 1 else points[None, :]
    if points.size == 0:
        raise GridError("Initial grid is empty")
    return points, None


def _check_step(path: BrownianPath, dt: float):
    if not dt > 0:
        raise GridError("Time step must be positive", {"dt": dt})
    if abs(dt - path.dt) > 1e-12 * path.dt:
        raise GridError("Flow and path must share the time grid", {"dt": dt, "path_dt": path.dt})


def simulate_flow(
    drift: DriftField,
    path: BrownianPath,
    s: float,
    T: float,
    direction: int,
    x_grid: Union[Lattice, np.ndarray],
    dt: float,
) -> FlowField:
    """phi_{s,t} for t in [s, s + T] (direction +1) or [s - T, s] (direction -1)."""
    _check_step(path, dt)
    if direction not in (1, -1):
        raise GridError("Direction must be +1 or -1", {"direction": direction})
    if drift.d != path.d:
        raise HypothesisError("Drift and path dimensions differ", {"drift_d": drift.d, "path_d": path.d})
    points, lattice = _points(x_grid, drift.d)
    if points.shape[-1] != drift.d:
        raise GridError("Initial points have the wrong dimension", {"d": drift.d, "shape": points.shape})
    steps = grid_steps(T, dt)
    start = path.index_of(s)
    end = start + direction * steps
    if end < 0 or end > path.steps:
        raise HorizonError("Path horizon does not cover the flow window", {"s": s, "T": T, "direction": direction})
    displacement = euler_displacements(drift, points, path.values[:, None, :], start, steps, direction, dt, t0=path.t0)
    times = s + direction * dt * np.arange(steps + 1)
    return FlowField(
        drift=drift, path=path, s=s, direction=direction, dt=dt, times=times,
        x_grid=points, displacement=displacement, lattice=lattice,
    )


@dataclass(frozen=True)
class DeviationReport:
    """Max deviation over evaluated points and the count of excluded points"""

    deviation: float
    evaluated: int
    excluded: int = 0
    per_point: Optional[np.ndarray] = field(default=None, repr=False)


def _report(errors: np.ndarray) -> DeviationReport:
    norms = np.linalg.norm(errors, axis=-1)
    valid = ~np.isnan(norms)
    excluded = int((~valid).sum())
    if excluded:
        logger.warning(f"{excluded} points left the interpolation hull and were excluded")
    deviation = float(norms[valid].max()) if valid.any() else float("nan")
    return DeviationReport(deviation=deviation, evaluated=int(valid.sum()), excluded=excluded, per_point=norms)


def compose_check(flowfield: FlowField, s: float, u: float, t: float) -> DeviationReport:
    """max |phi_{u,t}(phi_{s,u}(x)) - phi_{s,t}(x)|, phi_{u,t} interpolated on the lattice."""
    if flowfield.lattice is None:
        raise GridError("compose_check needs a regular lattice of initial points")
    if abs(s - flowfield.s) > 1e-12 or flowfield.direction != 1 or not s <= u <= t:
        raise GridError("Need s <= u <= t with s the flow's start time", {"s": s, "u": u, "t": t})
    first = flowfield.displacement_at(u)
    target = flowfield.displacement_at(t)
    middle = simulate_flow(flowfield.drift, flowfield.path, u, t - u, 1, flowfield.lattice, flowfield.dt)
    second = interpolate(flowfield.lattice, middle.displacement_at(t), flowfield.x_grid + first)
    return _report(first + second - target)


def inverse_flow_check(
    drift: DriftField, path: BrownianPath, s: float, t: float, x_grid: Union[Lattice, np.ndarray], dt: float
) -> DeviationReport:
    """max |phi_{t,s}(phi_{s,t}(x)) - x| with the backward leg on the same increments."""
    forward = simulate_flow(drift, path, s, t - s, 1, x_grid, dt)
    ends = forward.state_at(t)
    backward = simulate_flow(drift, path, t, t - s, -1, ends, dt)
    return _report(forward.displacement_at(t) + backward.displacement_at(s))


def cocycle_check(
    drift: DriftField, path: BrownianPath, t1: float, t2: float, x_grid: Union[Lattice, np.ndarray], dt: float
) -> DeviationReport:
    """max |phi_{0,t2}(phi_{0,t1}(x), theta(t1) w) - phi_{0,t1+t2}(x, w)|."""
    if not drift.autonomous:
        raise HypothesisError("Cocycle check needs an autonomous drift", {"key": drift.key})
    if path.horizon + 1e-12 < t1 + t2:
        raise HorizonError("Path shorter than t1 + t2", {"t1": t1, "t2": t2, "horizon": path.horizon})
    whole = simulate_flow(drift, path, 0.0, t1 + t2, 1, x_grid, dt)
    first = whole.displacement_at(t1)
    shifted = wiener_shift(path, t1)
    second = simulate_flow(drift, shifted, 0.0, t2, 1, whole.x_grid + first, dt)
    return _report(first + second.displacement_at(t2) - whole.displacement_at(t1 + t2))


@dataclass(frozen=True)
class MonotonicityReport:
    """Ordered-pair gap ratios (phi(y) - phi(x)) / (y - x) of a 1-d flow"""

    min_ratio: float
    max_ratio: float

    @property
    def strictly_increasing(self) -> bool:
        return self.min_ratio > 0.0


def monotonicity_check(flowfield: FlowField) -> MonotonicityReport:
    if flowfield.drift.d != 1:
        raise HypothesisError("Monotonicity is checked for one-dimensional flows")
    order = np.argsort(flowfield.x_grid[:, 0])
    x = flowfield.x_grid[order, 0]
    disp = flowfield.displacement[:, order, 0]
    gaps = np.diff(x)
    keep = gaps > 0
    ratios = 1.0 + np.diff(disp, axis=1)[:, keep] / gaps[keep]
    return MonotonicityReport(min_ratio=float(ratios.min()), max_ratio=float(ratios.max()))


def flow_to_frame(flowfield: FlowField) -> pd.DataFrame:
    """Long-format table: time, x_index, x_initial components, state components."""
    steps, count, d = flowfield.displacement.shape
    states = flowfield.states
    frame = {
        "time": np.repeat(flowfield.times, count),
        "x_index": np.tile(np.arange(count), steps),
    }
    for i in range(d):
        frame[f"x{i}"] = np.tile(flowfield.x_grid[:, i], steps)
    for i in range(d):
        frame[f"state{i}"] = states[:, :, i].ravel()
    return pd.DataFrame(frame)


# Ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    """How to draw an ensemble: root seed, size, step and study name for stream ids"""

    seed: int
    size: int
    dt: float
    study: str = "ensemble"

    def stream_ids(self) -> List[int]:
        return [stream_id_for(self.study, i) for i in range(self.size)]

    def sample(self, d: int, T: float, threads: Optional[int] = None) -> PathEnsemble:
        return sample_ensemble(self.seed, self.stream_ids(), d, T, self.dt, threads=threads)


@dataclass(frozen=True)
class EnsembleStates:
    """Displacements (R, M, P, d) at recorded times, optional Jacobians (R, M, P, d, d)"""

    times: np.ndarray
    x_points: np.ndarray
    displacement: np.ndarray
    jacobian: Optional[np.ndarray] = None


def simulate_ensemble(
    drift: DriftField,
    ensemble: PathEnsemble,
    x_points: np.ndarray,
    s: float,
    T: float,
    record_times: Optional[Sequence[float]] = None,
    with_jacobian: bool = False,
    threads: Optional[int] = None,
) -> EnsembleStates:
    """Forward flow of every ensemble member from the same initial points.

    Work is split into fixed-size member chunks so results do not depend on
    the thread count.
    """
    x_points = np.atleast_2d(np.asarray(x_points, dtype=float))
    steps = grid_steps(T, ensemble.dt)
    start = int(round(s / ensemble.dt))
    if start + steps > ensemble.steps:
        raise HorizonError("Ensemble horizon does not cover the window", {"s": s, "T": T})
    record_times = [s + T] if record_times is None else list(record_times)
    record = [int(round((t - s) / ensemble.dt)) for t in record_times]
    if record != sorted(set(record)) or any(r < 0 or r > steps for r in record):
        raise GridError("Record times must be increasing and inside the window", {"record_times": record_times})

    chunks = [slice(i, min(i + ENSEMBLE_CHUNK, ensemble.size)) for i in range(0, ensemble.size, ENSEMBLE_CHUNK)]

    def run(chunk: slice):
        values = np.moveaxis(ensemble.values[chunk], 1, 0)[:, :, None, :]
        return euler_displacements(
            drift, x_points, values, start, steps, 1, ensemble.dt, record=record, with_jacobian=with_jacobian
        )

    with ThreadPoolExecutor(max_workers=threads or settings.THREADS) as pool:
        results = list(pool.map(run, chunks))
    if with_jacobian:
        disp = np.concatenate([r[0] for r in results], axis=1)
        jac = np.concatenate([r[1] for r in results], axis=1)
    else:
        disp = np.concatenate(results, axis=1)
        jac = None
    return EnsembleStates(times=np.asarray(record_times, dtype=float), x_points=x_points, displacement=disp, jacobian=jac)


@dataclass(frozen=True)
class HolderFit:
    """Fitted log-log slopes of q-th moments against time and space gaps"""

    q: float
    beta_time: float
    se_time: float
    beta_space: float
    se_space: float
    time_gaps: np.ndarray
    time_moments: np.ndarray
    space_gaps: np.ndarray
    space_moments: np.ndarray


def _check_probes(gaps: Sequence[float], name: str) -> np.ndarray:
    gaps = np.asarray(sorted(gaps), dtype=float)
    if len(gaps) < 3:
        raise EstimationError(f"Need at least 3 {name} probes", {name: gaps.tolist()})
    if gaps[0] <= 0 or gaps[-1] / gaps[0] < 10**1.5 - 1e-9:
        raise EstimationError(f"{name} probes must be positive and span 1.5 decades", {name: gaps.tolist()})
    return gaps


def log_log_slope(gaps: np.ndarray, moments: np.ndarray) -> Tuple[float, float]:
    if np.any(moments <= 0):
        raise EstimationError("Moments must be positive for a log-log fit", {"moments": moments.tolist()})
    fit = stats.linregress(np.log(gaps), np.log(moments))
    return float(fit.slope), float(fit.stderr)


def holder_exponents(
    drift: DriftField,
    spec: EnsembleSpec,
    q: float,
    time_gaps: Sequence[float],
    space_gaps: Sequence[float],
    base_time: float = 0.5,
    x0: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> HolderFit:
    """Moment exponents of E|X^{x1}_{t1} - X^{x2}_{t2}|^q, one gap varied at a time."""
    if q not in (2, 4):
        raise EstimationError("q must be 2 or 4", {"q": q})
    time_gaps = _check_probes(time_gaps, "time_gaps")
    space_gaps = _check_probes(space_gaps, "space_gaps")
    d = drift.d
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    offsets = np.zeros((len(space_gaps) + 1, d))
    offsets[1:, 0] = space_gaps
    horizon = base_time + time_gaps[-1]
    ensemble = spec.sample(d, horizon, threads=threads)
    record = [base_time] + [base_time + g for g in time_gaps]
    result = simulate_ensemble(drift, ensemble, x0 + offsets, 0.0, horizon, record_times=record, threads=threads)

    anchor = result.displacement[0, :, 0]
    time_moments = np.array([
        np.mean(np.linalg.norm(result.displacement[k + 1, :, 0] - anchor, axis=-1) ** q)
        for k in range(len(time_gaps))
    ])
    space_moments = np.array([
        np.mean(np.linalg.norm(offsets[j + 1] + (result.displacement[0, :, j + 1] - anchor), axis=-1) ** q)
        for j in range(len(space_gaps))
    ])
    beta_time, se_time = log_log_slope(time_gaps, time_moments)
    beta_space, se_space = log_log_slope(space_gaps, space_moments)
    logger.info(f"Holder fit q={q}: beta_time={beta_time:.4f}+-{se_time:.4f}, beta_space={beta_space:.4f}+-{se_space:.4f}")
    return HolderFit(
        q=q, beta_time=beta_time, se_time=se_time, beta_space=beta_space, se_space=se_space,
        time_gaps=time_gaps, time_moments=time_moments, space_gaps=space_gaps, space_moments=space_moments,
    )


# Multiplicative noise in one dimension


def simulate_multiplicative_1d(
    b: DriftField,
    sigma: Callable[[np.ndarray], np.ndarray],
    path: BrownianPath,
    x0: Sequence[float],
    T: float,
    domain: Tuple[float, float],
    route: str = "lamperti",
    sigma_prime: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Trajectories (K + 1, P) of dX = b dt + sigma(X) dB.

    route "lamperti" runs the additive-noise SDE for Z = Lambda(X) and maps
    back through Lambda^{-1}; route "direct" is plain Euler-Maruyama.
    """
    if b.d != 1 or path.d != 1:
        raise HypothesisError("Multiplicative noise is simulated in one dimension")
    x0 = np.asarray(x0, dtype=float).ravel()
    steps = grid_steps(T, path.dt)
    if steps > path.steps:
        raise HorizonError("Path shorter than T", {"T": T})
    increments = path.increments[:steps, 0]
    out = np.empty((steps + 1, x0.size))
    if route == "direct":
        out[0] = x0
        for k in range(steps):
            x = out[k]
            out[k + 1] = x + b.eval(k * path.dt, x[:, None])[:, 0] * path.dt + sigma(x) * increments[k]
        return out
    if route != "lamperti":
        raise HypothesisError("Unknown route", {"route": route})
    transform = lamperti_transform(b, sigma, domain, sigma_prime=sigma_prime)
    lo, hi = transform.image
    z = transform.forward(x0)
    out[0] = x0
    for k in range(steps):
        z = np.clip(z + transform.drift.eval(k * path.dt, z[:, None])[:, 0] * path.dt + increments[k], lo, hi)
        out[k + 1] = transform.inverse(z)
    return out
