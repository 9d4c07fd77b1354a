"""
Stochastic transport by characteristics and weak-form residuals
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from flowlab.core.config import settings
from flowlab.core.exceptions import GridError, HypothesisError
from flowlab.services.fields import DriftField, mollify
from flowlab.services.flow import EnsembleSpec, Lattice, log_log_slope, simulate_flow
from flowlab.services.paths import BrownianPath, PathEnsemble, grid_steps

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InitialDatum:
    """Bounded C^1 datum u0 with its gradient and recorded norms"""

    name: str
    fn: ArrayFn
    gradient: ArrayFn
    sup_norm: float
    lipschitz: float

    def __call__(self, x) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=float))


def constant_datum(value: float = 1.0) -> InitialDatum:
    return InitialDatum(
        name="constant", fn=lambda x: np.full(x.shape[:-1], float(value)),
        gradient=lambda x: np.zeros(x.shape), sup_norm=abs(value), lipschitz=0.0,
    )


def tanh_datum(scale: float = 1.0) -> InitialDatum:
    """u0(x) = tanh(sum_i x_i / scale)"""

    def gradient(x):
        inner = np.tanh(np.sum(x, axis=-1) / scale)
        return np.repeat(((1.0 - inner**2) / scale)[..., None], x.shape[-1], axis=-1)

    return InitialDatum(
        name="tanh", fn=lambda x: np.tanh(np.sum(x, axis=-1) / scale), gradient=gradient,
        sup_norm=1.0, lipschitz=1.0 / scale,
    )


def gaussian_datum(width: float = 1.0) -> InitialDatum:
    """u0(x) = exp(-|x|^2 / 2 width^2)"""

    def fn(x):
        return np.exp(-np.sum(x**2, axis=-1) / (2.0 * width**2))

    return InitialDatum(
        name="gaussian", fn=fn, gradient=lambda x: -x / width**2 * fn(x)[..., None],
        sup_norm=1.0, lipschitz=float(np.exp(-0.5) / width),
    )


@dataclass(frozen=True)
class ProbeFunction:
    """Smooth theta with analytic gradient and Laplacian, supported in the ball B(center, radius)"""

    fn: ArrayFn
    gradient: ArrayFn
    laplacian: ArrayFn
    center: np.ndarray
    radius: float


def bump_probe(center, radius: float = 1.0) -> ProbeFunction:
    """theta(x) = exp(-1 / (1 - q)), q = |x - c|^2 / r^2, zero for q >= 1"""
    center = np.atleast_1d(np.asarray(center, dtype=float))

    def parts(x):
        offset = x - center
        q = np.sum(offset**2, axis=-1) / radius**2
        inside = q < 1.0
        gap = np.where(inside, 1.0 - q, 1.0)
        g = np.where(inside, np.exp(-1.0 / gap), 0.0)
        g1 = -g / gap**2
        g2 = g * (1.0 / gap**4 - 2.0 / gap**3)
        return offset, q, g, g1, g2

    def fn(x):
        return parts(x)[2]

    def gradient(x):
        offset, _, _, g1, _ = parts(x)
        return g1[..., None] * 2.0 * offset / radius**2

    def laplacian(x):
        offset, q, _, g1, g2 = parts(x)
        return g2 * 4.0 * q / radius**2 + g1 * 2.0 * x.shape[-1] / radius**2

    return ProbeFunction(fn=fn, gradient=gradient, laplacian=laplacian, center=center, radius=radius)


def gaussian_probe(center, width: float = 0.5) -> ProbeFunction:
    """Gaussian theta; treated as supported where it exceeds 1e-16 of its peak"""
    center = np.atleast_1d(np.asarray(center, dtype=float))

    def fn(x):
        return np.exp(-np.sum((x - center) ** 2, axis=-1) / (2.0 * width**2))

    def gradient(x):
        return -(x - center) / width**2 * fn(x)[..., None]

    def laplacian(x):
        r2 = np.sum((x - center) ** 2, axis=-1)
        return (r2 / width**4 - x.shape[-1] / width**2) * fn(x)

    return ProbeFunction(
        fn=fn, gradient=gradient, laplacian=laplacian, center=center,
        radius=float(width * np.sqrt(2.0 * np.log(1e16))),
    )


def lattice_gradient(lattice: Lattice, values: np.ndarray) -> np.ndarray:
    """Central differences of lattice values (..., P), one-sided at the boundary; returns (..., P, d)."""
    lead = values.shape[:-1]
    grid = values.reshape(lead + lattice.shape)
    parts = [
        np.gradient(grid, h, axis=len(lead) + j, edge_order=1).reshape(lead + (-1,))
        for j, h in enumerate(lattice.spacing)
    ]
    return np.stack(parts, axis=-1)


@dataclass(frozen=True)
class TransportField:
    """u(t, x) = u0(phi_{t,0}(x)) on a lattice for one path"""

    t: float
    lattice: Lattice
    values: np.ndarray
    gradient: np.ndarray
    datum: InitialDatum
    characteristics: np.ndarray

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def solve_transport(
    u0: InitialDatum, drift: DriftField, path: BrownianPath, t: float, lattice: Lattice, dt: float
) -> TransportField:
    """Backward characteristics from t to 0 on the lattice composed with u0."""
    if t == 0.0:
        origins = lattice.points
    else:
        backward = simulate_flow(drift, path, t, t, -1, lattice, dt)
        origins = backward.states[-1]
    values = u0(origins)
    return TransportField(
        t=t, lattice=lattice, values=values, gradient=lattice_gradient(lattice, values),
        datum=u0, characteristics=origins,
    )


def transport_to_frame(transport: TransportField) -> pd.DataFrame:
    points = transport.lattice.points
    columns: Dict[str, np.ndarray] = {f"x{i}": points[:, i] for i in range(points.shape[1])}
    columns["u"] = transport.values
    for i in range(points.shape[1]):
        columns[f"Du{i}"] = transport.gradient[:, i]
    return pd.DataFrame(columns)


# Ensemble pipelines


def _backward_to_origin(drift: DriftField, values: np.ndarray, x_points: np.ndarray, starts: np.ndarray, dt: float):
    """phi_{s_j, 0}(x) for ascending start indices s_j; `values` is (N + 1, M, 1, d).

    Each start runs the same Euler recursion as simulate_flow with direction -1.
    """
    shape = (len(starts),) + np.broadcast_shapes(x_points.shape, values.shape[1:])
    disp = np.zeros(shape)
    for k in range(int(starts[-1]), 0, -1):
        first = int(np.searchsorted(starts, k))
        state = x_points + disp[first:]
        disp[first:] = disp[first:] + drift.eval(k * dt, state) * (-dt) + (values[k - 1] - values[k])
    return x_points + disp


def _chunks(size: int, width: int) -> List[slice]:
    return [slice(i, min(i + width, size)) for i in range(0, size, width)]


def _ensemble_origins(
    drift: DriftField, ensemble: PathEnsemble, lattice: Lattice, starts: np.ndarray, threads: Optional[int]
) -> np.ndarray:
    """Backward characteristics for every member; (J, M, P, d)."""
    points = lattice.points
    width = max(1, (1 << 22) // (len(starts) * len(points) * drift.d))

    def run(chunk: slice):
        values = np.moveaxis(ensemble.values[chunk], 1, 0)[:, :, None, :]
        return _backward_to_origin(drift, values, points, starts, ensemble.dt)

    with ThreadPoolExecutor(max_workers=threads or settings.THREADS) as pool:
        results = list(pool.map(run, _chunks(ensemble.size, width)))
    return np.concatenate(results, axis=1)


@dataclass(frozen=True)
class ResidualStudy:
    """Weak-form residual R over an ensemble"""

    mean: float
    se: float
    abs_mean: float
    abs_se: float
    size: int
    dt: float
    h: float
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def within_noise(self) -> bool:
        return abs(self.mean) <= settings.SE_MULTIPLE * self.se

    def to_record(self) -> Dict[str, float]:
        return {"params": dict(self.params), "mean": self.mean, "se": self.se, "M": self.size, "dt": self.dt, "h": self.h}


def _check_support(theta: ProbeFunction, lattice: Lattice) -> None:
    for j, axis in enumerate(lattice.axes):
        lo, hi = axis[0] - 0.5 * lattice.spacing[j], axis[-1] + 0.5 * lattice.spacing[j]
        c = theta.center[min(j, len(theta.center) - 1)]
        # margin of one cell keeps theta zero where differences go one-sided
        if c - theta.radius <= lo + lattice.spacing[j] or c + theta.radius >= hi - lattice.spacing[j]:
            raise GridError(
                "Test function support exceeds the lattice hull",
                {"axis": j, "support": [c - theta.radius, c + theta.radius], "hull": [lo, hi]},
            )


def _interval_nodes(axis: np.ndarray, cuts: Sequence[float], order: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Gauss-Legendre offsets and weights on each lattice interval, split at the cuts inside it."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    rules = []
    for a, b in zip(axis[:-1], axis[1:]):
        ends = np.unique(np.concatenate([[a, b], [c for c in cuts if a < c < b]]))
        lo, hi = ends[:-1, None], ends[1:, None]
        offsets = 0.5 * (lo + hi) + 0.5 * (hi - lo) * nodes - a
        rules.append((offsets.ravel(), (0.5 * (hi - lo) * weights).ravel()))
    return rules


def edge_integrals(
    drift: DriftField, theta: ProbeFunction, lattice: Lattice, time: float, order: int = 8
) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """For each axis j: left and right node indices of every j-edge and int_edge b_j theta ds.

    Separable drifts are integrated piecewise between their breakpoints, so a
    jump sitting on a lattice node is never sampled there.
    """
    index = np.arange(len(lattice.points)).reshape(lattice.shape)
    points = lattice.points
    out = []
    for j, axis in enumerate(lattice.axes):
        cuts = drift.breakpoints[j] if drift.separable and j < len(drift.breakpoints) else ()
        lefts, rights, values = [], [], []
        for i, (offsets, weights) in enumerate(_interval_nodes(axis, cuts, order)):
            left = np.take(index, i, axis=j).ravel()
            nodes = np.repeat(points[left][:, None, :], len(offsets), axis=1)
            nodes[..., j] += offsets
            integrand = drift.eval(time, nodes)[..., j] * theta.fn(nodes)
            lefts.append(left)
            rights.append(np.take(index, i + 1, axis=j).ravel())
            values.append(integrand @ weights)
        out.append((np.concatenate(lefts), np.concatenate(rights), np.concatenate(values)))
    return out


def weak_residual(
    u0: InitialDatum,
    drift: DriftField,
    theta: ProbeFunction,
    t: float,
    spec: EnsembleSpec,
    lattice: Lattice,
    threads: Optional[int] = None,
) -> ResidualStudy:
    """Ito-form weak identity evaluated per path:

    R = int theta u(t) - int theta u0 + int_0^t int Du.b theta - sum_i int_0^t (int u D_i theta) dB^i
        - 1/2 int_0^t int u Laplacian(theta)

    Space integrals use the midpoint rule on the lattice, except the transport
    term, which pairs the difference of u across each lattice edge with the
    edge integral of b theta; the time integrals are left-point sums on the
    path grid.
    """
    if drift.d != lattice.d:
        raise HypothesisError("Drift and lattice dimensions differ", {"drift_d": drift.d, "lattice_d": lattice.d})
    _check_support(theta, lattice)
    dt = spec.dt
    steps = grid_steps(t, dt)
    ensemble = spec.sample(drift.d, t, threads=threads)
    points = lattice.points
    volume = float(np.prod(lattice.spacing))
    theta_values = theta.fn(points)
    theta_gradient = theta.gradient(points)
    theta_laplacian = theta.laplacian(points)

    starts = np.arange(steps + 1)
    origins = _ensemble_origins(drift, ensemble, lattice, starts, threads)  # (K + 1, M, P, d)
    u = u0(origins)  # (K + 1, M, P)

    start_term = (u[-1] - u[0]) @ theta_values * volume
    transport_term = np.zeros(ensemble.size)
    edges = None
    for k in range(steps):
        if edges is None or not drift.autonomous:
            edges = edge_integrals(drift, theta, lattice, k * dt)
        for (left, right, values), h in zip(edges, lattice.spacing):
            transport_term += (u[k][:, right] - u[k][:, left]) @ values * (volume / h**2) * dt
    flux = np.einsum("kmp,pd->kmd", u[:-1], theta_gradient) * volume
    increments = np.moveaxis(np.diff(ensemble.values, axis=1), 1, 0)  # (K, M, d)
    stochastic_term = np.sum(flux * increments, axis=(0, 2))
    correction = 0.5 * np.einsum("kmp,p->m", u[:-1], theta_laplacian) * volume * dt
    residual = start_term + transport_term - stochastic_term - correction

    size = ensemble.size
    study = ResidualStudy(
        mean=float(residual.mean()), se=float(residual.std(ddof=1) / np.sqrt(size)),
        abs_mean=float(np.abs(residual).mean()), abs_se=float(np.abs(residual).std(ddof=1) / np.sqrt(size)),
        size=size, dt=dt, h=float(max(lattice.spacing)),
        params={"t": t, "drift": drift.key, "datum": u0.name},
    )
    logger.info(f"Weak residual {drift.key}/{u0.name}: mean {study.mean:.3e} +- {study.se:.2e}, |R| {study.abs_mean:.3e}")
    return study


def residual_order(studies: Sequence[ResidualStudy]):
    """Measured order of mean |R| in dt across a refinement sequence."""
    dts = np.array([s.dt for s in studies])
    values = np.array([s.abs_mean for s in studies])
    return log_log_slope(dts, values)


@dataclass(frozen=True)
class MollificationStudy:
    levels: List[int]
    distances: np.ndarray
    standard_errors: np.ndarray

    def nonincreasing(self) -> bool:
        """Each distance is no larger than its predecessor up to the combined SE."""
        slack = settings.SE_MULTIPLE * (self.standard_errors[1:] + self.standard_errors[:-1])
        return bool(np.all(self.distances[1:] <= self.distances[:-1] + slack))


def _weighted_integrals(
    u0: InitialDatum, drift: DriftField, ensemble: PathEnsemble, t: float, lattice: Lattice,
    f_values: np.ndarray, threads: Optional[int],
) -> np.ndarray:
    """int u(t, x) f(x) dx per ensemble member."""
    steps = grid_steps(t, ensemble.dt)
    origins = _ensemble_origins(drift, ensemble, lattice, np.array([steps]), threads)[0]
    return u0(origins) @ f_values * float(np.prod(lattice.spacing))


def l2_distance(
    u0: InitialDatum,
    drift_a: DriftField,
    drift_b: DriftField,
    f: ArrayFn,
    t: float,
    spec: EnsembleSpec,
    lattice: Lattice,
    threads: Optional[int] = None,
):
    """L2(Omega) distance between int u_a(t) f and int u_b(t) f on common paths, with a delta-method SE."""
    ensemble = spec.sample(drift_a.d, t, threads=threads)
    f_values = f(lattice.points)
    gap = _weighted_integrals(u0, drift_a, ensemble, t, lattice, f_values, threads) - _weighted_integrals(
        u0, drift_b, ensemble, t, lattice, f_values, threads
    )
    squared = gap**2
    distance = float(np.sqrt(squared.mean()))
    se_squared = float(squared.std(ddof=1) / np.sqrt(len(squared)))
    se = se_squared / (2.0 * distance) if distance > 0 else 0.0
    return distance, se


def mollification_convergence(
    u0: InitialDatum,
    base: DriftField,
    levels: Sequence[int],
    f: ArrayFn,
    t: float,
    spec: EnsembleSpec,
    lattice: Lattice,
    members: Optional[Sequence[DriftField]] = None,
    threads: Optional[int] = None,
) -> MollificationStudy:
    """Distances of the level-n transport fields to the base-drift field, tested against f."""
    levels = list(levels)
    if levels != sorted(levels):
        raise GridError("Mollification levels must increase", {"levels": levels})
    if members is None:
        members = [base if base.smooth else mollify(base, n) for n in levels]
    distances, ses = [], []
    for level, member in zip(levels, members):
        distance, se = l2_distance(u0, member, base, f, t, spec, lattice, threads)
        distances.append(distance)
        ses.append(se)
        logger.debug(f"Level {level}: L2 distance {distance:.4e} +- {se:.1e}")
    return MollificationStudy(levels=levels, distances=np.array(distances), standard_errors=np.array(ses))


def du_fourth_moment(
    u0: InitialDatum, drift: DriftField, t: float, spec: EnsembleSpec, lattice: Lattice, threads: Optional[int] = None
):
    """Lattice estimate of sup_x E|Du(t, x)|^4 and its SE."""
    ensemble = spec.sample(drift.d, t, threads=threads)
    origins = _ensemble_origins(drift, ensemble, lattice, np.array([grid_steps(t, spec.dt)]), threads)[0]
    du = lattice_gradient(lattice, u0(origins))
    fourth = np.linalg.norm(du, axis=-1) ** 4
    means = fourth.mean(axis=0)
    worst = int(np.argmax(means))
    return float(means[worst]), float(fourth[:, worst].std(ddof=1) / np.sqrt(ensemble.size))
