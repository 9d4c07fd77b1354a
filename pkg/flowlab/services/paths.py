"""
Brownian paths, Wiener shift, Girsanov weights and 1-d local times
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from flowlab.core.config import settings
from flowlab.core.exceptions import GridError, HorizonError, HypothesisError
from flowlab.core.rng import generator
from flowlab.services.fields import DriftField

logger = logging.getLogger(__name__)

# Increments live on the 2**-40 lattice so sums and differences of path values are exact.
_DYADIC_BITS = 40
_MAX_STEPS = 10**9


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.ldexp(np.rint(np.ldexp(values, _DYADIC_BITS)), -_DYADIC_BITS)


def grid_steps(T: float, dt: float) -> int:
    """Number of steps N with N * dt = T, or GridError."""
    if not dt > 0:
        raise GridError("Time step must be positive", {"dt": dt})
    if T < 0:
        raise GridError("Horizon must be nonnegative", {"T": T})
    ratio = T / dt
    if ratio > _MAX_STEPS:
        raise GridError("Too many grid steps", {"T": T, "dt": dt})
    steps = int(round(ratio))
    if abs(steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise GridError("T is not a multiple of dt", {"T": T, "dt": dt})
    return steps


@dataclass(frozen=True)
class BrownianPath:
    """One d-dimensional Wiener trajectory on the grid t0 + k * dt."""

    d: int
    dt: float
    values: np.ndarray
    seed: int
    stream_id: int
    t0: float = 0.0

    @property
    def steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def t_grid(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if abs(self.t0 + k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise GridError("Time is not on the path grid", {"t": t, "dt": self.dt})
        if k < 0 or k > self.steps:
            raise HorizonError("Time outside the stored path", {"t": t, "horizon": self.t0 + self.horizon})
        return k

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.index_of(t)]

    def shift_then_read(self, t1: float, t2: float) -> np.ndarray:
        k1 = self.index_of(t1)
        k2 = int(round(t2 / self.dt))
        if k1 + k2 > self.steps:
            raise HorizonError("Shifted read beyond the stored path", {"t1": t1, "t2": t2})
        return self.values[k1 + k2] - self.values[k1]

    def coarsen(self, factor: int) -> "BrownianPath":
        """The same trajectory read every factor-th grid point, on step factor * dt."""
        if factor < 1 or self.steps % factor:
            raise GridError("Coarsening factor must divide the step count", {"factor": factor, "steps": self.steps})
        return BrownianPath(
            d=self.d, dt=self.dt * factor, values=self.values[::factor], seed=self.seed,
            stream_id=self.stream_id, t0=self.t0,
        )


@dataclass(frozen=True)
class PathEnsemble:
    """Independent Brownian paths sharing a grid; member i uses stream_ids[i]."""

    d: int
    dt: float
    values: np.ndarray  # (M, N + 1, d)
    seed: int
    stream_ids: tuple

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def member(self, i: int) -> BrownianPath:
        return BrownianPath(d=self.d, dt=self.dt, values=self.values[i], seed=self.seed, stream_id=self.stream_ids[i])


def _draw_values(seed: int, stream_id: int, d: int, steps: int, dt: float) -> np.ndarray:
    rng = generator(seed, stream_id)
    increments = _quantize(rng.standard_normal((steps, d)) * np.sqrt(dt))
    values = np.zeros((steps + 1, d))
    np.cumsum(increments, axis=0, out=values[1:])
    return values


def sample_path(seed: int, stream_id: int, d: int, T: float, dt: float) -> BrownianPath:
    """Brownian path on [0, T] determined by (seed, stream_id, d, T, dt)."""
    if d < 1:
        raise GridError("Dimension must be positive", {"d": d})
    steps = grid_steps(T, dt)
    return BrownianPath(d=d, dt=dt, values=_draw_values(seed, stream_id, d, steps, dt), seed=seed, stream_id=stream_id)


def sample_ensemble(
    seed: int, stream_ids: Sequence[int], d: int, T: float, dt: float, threads: Optional[int] = None
) -> PathEnsemble:
    """Paths for many stream ids; the result does not depend on `threads`."""
    steps = grid_steps(T, dt)
    stream_ids = tuple(int(s) for s in stream_ids)
    values = np.zeros((len(stream_ids), steps + 1, d))

    def fill(i: int):
        values[i] = _draw_values(seed, stream_ids[i], d, steps, dt)

    with ThreadPoolExecutor(max_workers=threads or settings.THREADS) as pool:
        list(pool.map(fill, range(len(stream_ids))))
    logger.debug(f"Sampled {len(stream_ids)} paths with {steps} steps")
    return PathEnsemble(d=d, dt=dt, values=values, seed=seed, stream_ids=stream_ids)


def wiener_shift(path: BrownianPath, t1: float) -> BrownianPath:
    """theta(t1): s -> w(t1 + s) - w(t1), re-anchored at time 0."""
    k1 = path.index_of(t1)
    if k1 == 0:
        return path
    if k1 >= path.steps:
        raise HorizonError("Shift leaves no stored path", {"t1": t1, "horizon": path.horizon})
    return BrownianPath(
        d=path.d, dt=path.dt, values=path.values[k1:] - path.values[k1], seed=path.seed, stream_id=path.stream_id
    )


def ito_integral(integrand: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Left-point sums sum_k H_k . dB_k over the leading (time) axis."""
    return np.sum(np.sum(integrand * increments, axis=-1), axis=0)


def girsanov_weight(path: BrownianPath, b: DriftField, x, T: float) -> Union[float, np.ndarray]:
    """Discrete Doleans-Dade exponential of int b(t, x + B) dB up to T."""
    x = np.asarray(x, dtype=float)
    k_end = path.index_of(path.t0 + T)
    times = path.t_grid[:k_end]
    shifted = x[None, ...] + path.values[:k_end].reshape((k_end,) + (1,) * (x.ndim - 1) + (path.d,))
    drift = np.stack([b.eval(t, shifted[k]) for k, t in enumerate(times)]) if k_end else np.zeros_like(shifted)
    increments = path.increments[:k_end].reshape(drift.shape[:1] + (1,) * (x.ndim - 1) + (path.d,))
    exponent = ito_integral(drift, increments) - 0.5 * np.sum(drift**2, axis=(0, -1)) * path.dt
    weight = np.exp(exponent)
    return float(weight) if np.ndim(weight) == 0 else weight


def girsanov_ensemble_weights(ensemble: PathEnsemble, b: DriftField, x, T: float) -> np.ndarray:
    """Weights for every member of an ensemble started at the point x."""
    x = np.asarray(x, dtype=float)
    k_end = grid_steps(T, ensemble.dt)
    if k_end > ensemble.steps:
        raise HorizonError("Ensemble horizon shorter than T", {"T": T})
    log_weight = np.zeros(ensemble.size)
    for k in range(k_end):
        drift = b.eval(k * ensemble.dt, x + ensemble.values[:, k])
        log_weight += np.sum(drift * (ensemble.values[:, k + 1] - ensemble.values[:, k]), axis=-1)
        log_weight -= 0.5 * np.sum(drift**2, axis=-1) * ensemble.dt
    return np.exp(log_weight)


# Local time


@dataclass(frozen=True)
class LocalTimeGrid:
    """Occupation density of a 1-d trajectory on a time x space mesh.

    mass[i, j] is the time spent in space bin j during time bin i divided by
    the bin width, so sum(mass * width) is the elapsed time inside the window.
    `diffusion` is the quadratic-variation rate of the trajectory.
    """

    time_edges: np.ndarray
    space_edges: np.ndarray
    mass: np.ndarray
    truncated_fraction: float = 0.0
    diffusion: float = 1.0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.space_edges)

    @property
    def space_centers(self) -> np.ndarray:
        return 0.5 * (self.space_edges[:-1] + self.space_edges[1:])

    @property
    def time_centers(self) -> np.ndarray:
        return 0.5 * (self.time_edges[:-1] + self.time_edges[1:])

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.mass * self.widths))


def uniform_edges(lo: float, hi: float, width: float, center_on: Optional[float] = None) -> np.ndarray:
    """Equal-width bin edges covering [lo, hi]; `center_on` becomes a bin center."""
    if not width > 0 or not hi > lo:
        raise GridError("Bins need width > 0 and hi > lo", {"lo": lo, "hi": hi, "width": width})
    anchor = lo if center_on is None else center_on - 0.5 * width
    start = anchor + np.floor((lo - anchor) / width) * width
    count = int(np.ceil((hi - start) / width - 1e-12))
    return start + width * np.arange(count + 1)


def _occupation(trajectory: np.ndarray, dt: float, edges: np.ndarray) -> np.ndarray:
    """Per-step time spent in each bin by the piecewise-linear interpolant, (K, J)."""
    a, b = trajectory[:-1], trajectory[1:]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    span = hi - lo
    overlap = np.clip(
        np.minimum(hi[:, None], edges[None, 1:]) - np.maximum(lo[:, None], edges[None, :-1]), 0.0, None
    )
    moving = span > 0
    out = np.zeros(overlap.shape)
    out[moving] = overlap[moving] / span[moving, None]
    still = ~moving
    if np.any(still):
        out[still] = (edges[None, :-1] <= a[still, None]) & (a[still, None] < edges[None, 1:])
    return out * dt


def local_time_grid(
    trajectory: Union[BrownianPath, np.ndarray],
    space_bins: Sequence[float],
    time_bins: Optional[Sequence[float]] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
    diffusion: float = 1.0,
    chunk: int = 4096,
) -> LocalTimeGrid:
    """Occupation-density estimate L(ds, dy) of a 1-d trajectory."""
    if isinstance(trajectory, BrownianPath):
        if trajectory.d != 1:
            raise HypothesisError("Local times are computed for one-dimensional paths", {"d": trajectory.d})
        values, dt, t0 = trajectory.values[:, 0], trajectory.dt, trajectory.t0
    else:
        values = np.asarray(trajectory, dtype=float)
        if values.ndim == 2 and values.shape[1] == 1:
            values = values[:, 0]
        if values.ndim != 1:
            raise HypothesisError("Local times are computed for one-dimensional paths", {"shape": values.shape})
        if dt is None or not dt > 0:
            raise GridError("A positive dt is required for raw trajectories", {"dt": dt})
    space_edges = np.asarray(space_bins, dtype=float)
    steps = len(values) - 1
    elapsed = steps * dt
    time_edges = np.asarray(time_bins if time_bins is not None else (t0, t0 + elapsed), dtype=float)

    starts = t0 + dt * np.arange(steps)
    time_index = np.clip(np.searchsorted(time_edges, starts + 1e-12 * dt, side="right") - 1, 0, len(time_edges) - 2)
    occupied = np.zeros((len(time_edges) - 1, len(space_edges) - 1))
    for begin in range(0, steps, chunk):
        stop = min(begin + chunk, steps)
        block = _occupation(values[begin : stop + 1], dt, space_edges)
        np.add.at(occupied, time_index[begin:stop], block)

    inside = float(occupied.sum())
    truncated = 0.0 if elapsed == 0 else max(0.0, 1.0 - inside / elapsed)
    if truncated > 0.0:
        logger.warning(f"Trajectory left the local-time window; truncated mass fraction {truncated:.3e}")
    return LocalTimeGrid(
        time_edges=time_edges,
        space_edges=space_edges,
        mass=occupied / np.diff(space_edges)[None, :],
        truncated_fraction=truncated,
        diffusion=float(diffusion),
        meta={"dt": dt, "steps": steps},
    )


def local_time_space_integral(ltg: LocalTimeGrid, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """sum over cells of f(cell center) times the cell's occupation."""
    s = ltg.time_centers[:, None]
    y = ltg.space_centers[None, :]
    values = np.broadcast_to(np.asarray(f(s, y), dtype=float), ltg.mass.shape)
    return float(np.sum(values * ltg.mass * ltg.widths[None, :]))


def local_time_gradient_integral(ltg: LocalTimeGrid, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """Space-time integral of f against the spatial increments of local time.

    Discrete summation by parts: -diffusion * sum L_ij (f(s_i, e_{j+1}) - f(s_i, e_j)).
    For smooth f this is -int f'(X_s) d<X>_s; jumps of f between bin edges
    are picked up by the cell that contains them.
    """
    s = ltg.time_centers[:, None]
    edges = ltg.space_edges[None, :]
    values = np.broadcast_to(np.asarray(f(s, edges), dtype=float), (len(ltg.time_centers), len(ltg.space_edges)))
    return float(-ltg.diffusion * np.sum(ltg.mass * np.diff(values, axis=1)))


@dataclass(frozen=True)
class IdentityCheck:
    """Two independently computed sides of an identity"""

    lhs: float
    rhs: float

    @property
    def relative_error(self) -> float:
        return abs(self.lhs - self.rhs) / max(abs(self.rhs), 1e-300)


def local_time_identity_check(
    path: BrownianPath, b: DriftField, x: float, delta: float, bin_width: float, t: Optional[float] = None
) -> IdentityCheck:
    """Compare both sides of the local-time identity for Y = delta * B + x.

    lhs = -(1/delta^2) int int b(y) L^Y(ds, dy)
    rhs = 2 (F(Y_t) - F(x) - int (1/delta^2) b(Y_s) delta dB_s),  F(y) = int_0^y b(u)/delta^2 du
    """
    if path.d != 1 or b.d != 1:
        raise HypothesisError("The local-time identity is one-dimensional", {"d": path.d})
    t = path.horizon if t is None else t
    k_end = path.index_of(path.t0 + t)
    y = x + delta * path.values[: k_end + 1, 0]

    edges = uniform_edges(y.min() - 2 * bin_width, y.max() + 2 * bin_width, bin_width)
    ltg = local_time_grid(y, edges, dt=path.dt, t0=path.t0, diffusion=delta**2)
    lhs = -local_time_gradient_integral(ltg, lambda s, z: b.eval(0.0, z[..., None])[..., 0]) / delta**2

    def antiderivative(level: float) -> float:
        value, _ = integrate.quad(lambda u: float(b.eval(0.0, np.array([[u]]))[0, 0]), 0.0, level, limit=200)
        return value / delta**2

    integrand = b.eval(0.0, y[:-1, None]) / delta**2 * delta
    stochastic = float(ito_integral(integrand, path.increments[:k_end]))
    rhs = 2.0 * (antiderivative(y[-1]) - antiderivative(x) - stochastic)
    logger.debug(f"Local-time identity: lhs={lhs:.6g} rhs={rhs:.6g}")
    return IdentityCheck(lhs=lhs, rhs=rhs)
