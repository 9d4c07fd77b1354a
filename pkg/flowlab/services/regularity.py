"""
Weighted Sobolev norms, A_p diagnostics and flow Jacobians
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special, stats

from flowlab.core.exceptions import EstimationError, GridError, HypothesisError, QuadratureError
from flowlab.services.fields import DriftField
from flowlab.services.flow import EnsembleSpec, FlowField, Lattice, simulate_ensemble

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JacobianField:
    """d x d matrices dphi_{s,t}(x)/dx indexed like a FlowField"""

    times: np.ndarray
    x_grid: np.ndarray
    matrices: np.ndarray  # (K + 1, P, d, d)
    method: str

    def at(self, index: int) -> np.ndarray:
        return self.matrices[index]


def variational_jacobian(drift: DriftField, flowfield: FlowField) -> JacobianField:
    """Forward Euler for dJ = b'(t, X) J dt along each stored trajectory, J(s) = I."""
    if not drift.smooth:
        raise HypothesisError(f"Drift '{drift.key}' has no jacobian", {"key": drift.key})
    states = flowfield.states
    step = flowfield.direction * flowfield.dt
    count, d = flowfield.x_grid.shape
    jac = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    out = np.empty((len(flowfield.times), count, d, d))
    out[0] = jac
    for k in range(len(flowfield.times) - 1):
        jac = jac + np.matmul(drift.eval_jacobian(flowfield.times[k], states[k]), jac) * step
        out[k + 1] = jac
    return JacobianField(times=flowfield.times, x_grid=flowfield.x_grid, matrices=out, method="variational")


def fd_jacobian(flowfield: FlowField) -> JacobianField:
    """Central differences of the flow over the lattice, one-sided on its boundary."""
    lattice = flowfield.lattice
    if lattice is None or any(n < 2 for n in lattice.shape):
        raise GridError("Finite differences need a lattice with two points per axis")
    steps, count, d = flowfield.displacement.shape
    disp = flowfield.displacement.reshape((steps,) + lattice.shape + (d,))
    out = np.broadcast_to(np.eye(d), (steps, count, d, d)).copy()
    for j, h in enumerate(lattice.spacing):
        # identity plus the gradient of the displacement keeps translations exact
        grad = np.gradient(disp, h, axis=1 + j, edge_order=1)
        out[..., :, j] += grad.reshape(steps, count, d)
    return JacobianField(times=flowfield.times, x_grid=flowfield.x_grid, matrices=out, method="finite_difference")


def convergence_ratios(errors: Sequence[float]) -> np.ndarray:
    """err(h) / err(h/2) along a halving sequence"""
    errors = np.asarray(errors, dtype=float)
    return errors[:-1] / errors[1:]


# Derivative moments


def sample_lipschitz(drift: DriftField, radius: float = 3.0, samples: int = 20001) -> float:
    """Largest sampled Frobenius norm of b' on a 1-d grid or random box."""
    if drift.d == 1:
        points = np.linspace(-radius, radius, samples)[:, None]
    else:
        points = np.random.default_rng(0).uniform(-radius, radius, (samples, drift.d))
    return float(np.linalg.norm(drift.eval_jacobian(0.0, points), axis=(-2, -1)).max())


@dataclass(frozen=True)
class DerivativeMomentStudy:
    """Per-level estimates of sup over probes of E|dX_t^x/dx|^p"""

    levels: List[int]
    p: float
    t: float
    estimates: np.ndarray
    standard_errors: np.ndarray
    lipschitz: np.ndarray
    weighted_estimates: Optional[np.ndarray] = None
    weighted_standard_errors: Optional[np.ndarray] = None

    @property
    def ratio(self) -> float:
        return float(self.estimates.max() / self.estimates.min())

    def trend(self) -> Tuple[float, float]:
        """Weighted slope of log(estimate) against log(level) and its standard error.

        Weights are the inverse squared relative Monte-Carlo errors; the residual
        scale never drops below one when every error is positive.
        """
        k = len(self.levels)
        if k < 3 or np.any(self.estimates <= 0):
            return 0.0, float("inf")
        x = np.log(np.asarray(self.levels, dtype=float))
        y = np.log(self.estimates)
        sigma = np.asarray(self.standard_errors, dtype=float) / self.estimates
        weighted = bool(np.all(sigma > 0))
        w = 1.0 / sigma ** 2 if weighted else np.ones(k)
        x_bar, y_bar = np.average(x, weights=w), np.average(y, weights=w)
        sxx = float(np.sum(w * (x - x_bar) ** 2))
        slope = float(np.sum(w * (x - x_bar) * (y - y_bar)) / sxx)
        residual = y - y_bar - slope * (x - x_bar)
        scale = float(np.sum(w * residual ** 2)) / (k - 2)
        if weighted:
            scale = max(scale, 1.0)
        return slope, float(np.sqrt(scale / sxx))

    def positive_trend(self, confidence: float = 0.95) -> bool:
        """One-sided t test on the weighted slope with len(levels) - 2 degrees of freedom."""
        slope, se = self.trend()
        if not np.isfinite(se):
            return False
        quantile = float(stats.t.ppf(0.5 + confidence / 2.0, len(self.levels) - 2))
        return slope - quantile * se > 0.0


def _frobenius_moments(jacobians: np.ndarray, p: float, weights: Optional[np.ndarray] = None):
    """Mean and SE over the ensemble axis of |J|^p (times weights) per probe."""
    values = np.linalg.norm(jacobians, axis=(-2, -1)) ** p
    if weights is not None:
        values = values * weights[:, None]
    size = values.shape[0]
    return values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(size)


def girsanov_derivative_moment(
    drift: DriftField, p: float, t: float, x_probes: np.ndarray, spec: EnsembleSpec, threads: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """E|dX/dx|^p as a Brownian expectation reweighted by the Doleans-Dade exponential.

    J is propagated along x + B and each sample carries
    exp(int b(x + B) dB - 1/2 int |b(x + B)|^2 ds).
    """
    x_probes = np.atleast_2d(np.asarray(x_probes, dtype=float))
    ensemble = spec.sample(drift.d, t, threads=threads)
    steps = ensemble.steps
    d = drift.d
    jac = np.broadcast_to(np.eye(d), (ensemble.size, len(x_probes), d, d)).copy()
    log_weight = np.zeros((ensemble.size, len(x_probes)))
    for k in range(steps):
        time = k * ensemble.dt
        state = x_probes[None] + ensemble.values[:, k][:, None, :]
        jac = jac + np.matmul(drift.eval_jacobian(time, state), jac) * ensemble.dt
        b = drift.eval(time, state)
        increment = (ensemble.values[:, k + 1] - ensemble.values[:, k])[:, None, :]
        log_weight += np.sum(b * increment, axis=-1) - 0.5 * np.sum(b**2, axis=-1) * ensemble.dt
    values = np.linalg.norm(jac, axis=(-2, -1)) ** p * np.exp(log_weight)
    return values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(ensemble.size)


def derivative_moment(
    family: Sequence[DriftField],
    p: float,
    t: float,
    x_probes,
    spec: EnsembleSpec,
    levels: Optional[Sequence[int]] = None,
    max_relative_se: Optional[float] = None,
    weighted: bool = False,
    threads: Optional[int] = None,
) -> DerivativeMomentStudy:
    """Monte-Carlo sup_x E|dX_t^x/dx|^p for each member of a smooth drift family.

    All members share one ensemble, so differences across levels are not
    sampling noise between independent runs.
    """
    if spec.size < 100:
        raise EstimationError("Ensemble too small for a derivative moment", {"M": spec.size})
    family = list(family)
    for member in family:
        if not member.smooth:
            raise HypothesisError(f"Drift '{member.key}' has no jacobian", {"key": member.key})
    sups = {round(m.sup_bound, 12) for m in family}
    if len(sups) > 1:
        raise HypothesisError("Family members must share one sup bound", {"sup_bounds": sorted(sups)})
    levels = list(levels) if levels is not None else [int(m.params.get("mollification", i + 1)) for i, m in enumerate(family)]
    x_probes = np.atleast_2d(np.asarray(x_probes, dtype=float))
    if x_probes.shape[-1] != family[0].d:
        x_probes = x_probes.reshape(-1, family[0].d)
    ensemble = spec.sample(family[0].d, t, threads=threads)

    estimates, ses, lipschitz = [], [], []
    weighted_estimates, weighted_ses = [], []
    for level, member in zip(levels, family):
        result = simulate_ensemble(member, ensemble, x_probes, 0.0, t, with_jacobian=True, threads=threads)
        mean, se = _frobenius_moments(result.jacobian[-1], p)
        worst = int(np.argmax(mean))
        if max_relative_se is not None and se[worst] > max_relative_se * mean[worst]:
            raise EstimationError(
                "Ensemble too small for the requested precision",
                {"level": level, "relative_se": float(se[worst] / mean[worst])},
            )
        estimates.append(mean[worst])
        ses.append(se[worst])
        lipschitz.append(sample_lipschitz(member))
        if weighted:
            w_mean, w_se = girsanov_derivative_moment(member, p, t, x_probes, spec, threads=threads)
            w_worst = int(np.argmax(w_mean))
            weighted_estimates.append(w_mean[w_worst])
            weighted_ses.append(w_se[w_worst])
        logger.debug(f"Level {level}: E|J|^{p} = {mean[worst]:.5f} +- {se[worst]:.5f}, Lip = {lipschitz[-1]:.3g}")

    study = DerivativeMomentStudy(
        levels=levels, p=p, t=t, estimates=np.array(estimates), standard_errors=np.array(ses),
        lipschitz=np.array(lipschitz),
        weighted_estimates=np.array(weighted_estimates) if weighted else None,
        weighted_standard_errors=np.array(weighted_ses) if weighted else None,
    )
    logger.info(f"Derivative moments over levels {levels}: ratio max/min = {study.ratio:.4f}")
    return study


# Weights and weighted Sobolev norms


@dataclass(frozen=True)
class WeightFunction:
    """Positive weight w on R^d with an exponent p and moment information"""

    fn: Callable[[np.ndarray], np.ndarray]
    p: float
    d: int
    family: str = "custom"
    gamma: Optional[float] = None
    full_moments: Optional[Tuple[float, float]] = None  # (int w, int |x|^p w) over R^d
    meta: Dict[str, float] = field(default_factory=dict)

    def eval(self, x) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def scaled(self, factor: float) -> "WeightFunction":
        moments = None if self.full_moments is None else tuple(factor * m for m in self.full_moments)
        return WeightFunction(
            fn=lambda x: factor * self.fn(x), p=self.p, d=self.d, family=self.family, gamma=self.gamma,
            full_moments=moments, meta=dict(self.meta),
        )


def constant_weight(d: int, p: float, value: float = 1.0) -> WeightFunction:
    return WeightFunction(fn=lambda x: np.full(x.shape[:-1], value), p=p, d=d, family="constant", gamma=0.0)


def power_weight(d: int, p: float, gamma: float) -> WeightFunction:
    return WeightFunction(
        fn=lambda x: np.linalg.norm(x, axis=-1) ** gamma, p=p, d=d, family="power", gamma=gamma
    )


def gaussian_weight(d: int, p: float, scale: float = 1.0) -> WeightFunction:
    """w(x) = exp(-|x|^2 / 2 scale^2) with closed-form moments"""
    mass = (2.0 * np.pi) ** (d / 2.0) * scale**d
    absolute_moment = 2.0 ** (p / 2.0) * special.gamma((d + p) / 2.0) / special.gamma(d / 2.0) * scale**p
    return WeightFunction(
        fn=lambda x: np.exp(-np.sum(x**2, axis=-1) / (2.0 * scale**2)), p=p, d=d, family="gaussian",
        full_moments=(mass, mass * absolute_moment), meta={"scale": scale},
    )


def _midpoint_lattice(radius: float, cells: int, d: int) -> Tuple[np.ndarray, float]:
    h = 2.0 * radius / cells
    axis = -radius + h * (np.arange(cells) + 0.5)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), h**d


@dataclass(frozen=True)
class MomentCertificate:
    """int (1 + |x|^p) w over [-R, R]^d and a bound for the part outside"""

    value: float
    tail: float
    radius: float


def moment_certificate(w: WeightFunction, radius: float, cells: int = 400) -> MomentCertificate:
    cells_per_axis = cells if w.d == 1 else max(8, int(round(cells ** (1.0 / w.d) * 4)))
    points, volume = _midpoint_lattice(radius, cells_per_axis, w.d)
    integrand = (1.0 + np.linalg.norm(points, axis=-1) ** w.p) * w.eval(points)
    value = float(np.sum(integrand) * volume)
    if w.full_moments is not None:
        tail = max(0.0, w.full_moments[0] + w.full_moments[1] - value)
    else:
        outer_points, outer_volume = _midpoint_lattice(2.0 * radius, 2 * cells_per_axis, w.d)
        outer = (1.0 + np.linalg.norm(outer_points, axis=-1) ** w.p) * w.eval(outer_points)
        shell = np.any(np.abs(outer_points) > radius, axis=-1)
        tail = float(np.sum(outer[shell]) * outer_volume)
        # a weight that does not decay has no finite certificate
        if tail > 0.5 * value:
            tail = float("inf")
    return MomentCertificate(value=value, tail=tail, radius=radius)


def choose_radius(w: WeightFunction, start: float = 1.0, ratio: float = 1e-3, max_doublings: int = 12) -> MomentCertificate:
    """Smallest doubled radius whose tail is below `ratio` times the certificate."""
    radius = start
    for _ in range(max_doublings):
        cert = moment_certificate(w, radius)
        if cert.tail < ratio * cert.value:
            return cert
        radius *= 2.0
    raise QuadratureError("Weight tail does not decay on any tested radius", {"radius": radius})


@dataclass(frozen=True)
class SobolevNorm:
    """||u||_{L^p(w)} + sum_ij ||D_j u_i||_{L^p(w)} with its parts"""

    value: float
    lp_part: float
    derivative_parts: np.ndarray
    tail_bound: float
    p: float


def sobolev_norm(
    points: np.ndarray, cell_volume: float, values: np.ndarray, jacobians: np.ndarray, w: WeightFunction
) -> Tuple[float, float, np.ndarray]:
    """Midpoint-rule weighted W^{1,p} norm of lattice data"""
    weights = w.eval(points)
    if np.any(~(weights > 0)):
        raise QuadratureError("Weight is not positive at every quadrature node", {"min_weight": float(np.nanmin(weights))})
    p = w.p
    lp = float((np.sum(np.linalg.norm(values, axis=-1) ** p * weights) * cell_volume) ** (1.0 / p))
    parts = (np.sum(np.abs(jacobians) ** p * weights[:, None, None], axis=0) * cell_volume) ** (1.0 / p)
    return lp + float(parts.sum()), lp, parts


def weighted_sobolev_norm(
    flowfield: FlowField, jacobianfield: JacobianField, w: WeightFunction, t: Optional[float] = None
) -> SobolevNorm:
    """||phi_{s,t}||_{1,p,w} on the flow lattice, lattice points as cell midpoints."""
    lattice: Optional[Lattice] = flowfield.lattice
    if lattice is None:
        raise GridError("Sobolev norms need a regular lattice")
    if jacobianfield.matrices.shape[:2] != flowfield.displacement.shape[:2]:
        raise GridError("Flow and Jacobian grids differ")
    if w.d != lattice.d:
        raise GridError("Weight dimension differs from the lattice", {"w_d": w.d, "lattice_d": lattice.d})
    index = len(flowfield.times) - 1 if t is None else flowfield.index_of(t)
    volume = float(np.prod(lattice.spacing))
    value, lp, parts = sobolev_norm(
        flowfield.x_grid, volume, flowfield.x_grid + flowfield.displacement[index], jacobianfield.matrices[index], w
    )
    half_width = min(float(min(abs(a[0]), abs(a[-1]))) + 0.5 * h for a, h in zip(lattice.axes, lattice.spacing))
    tail = moment_certificate(w, half_width).tail
    return SobolevNorm(value=value, lp_part=lp, derivative_parts=parts, tail_bound=tail, p=w.p)


# Muckenhoupt A_p diagnostics


def _ball_average(exponent: float, d: int, radius: float, floor: float = 0.0) -> float:
    """Average of |x|^a over the origin-centered ball, integrand cut below |x| = floor."""
    total = exponent + d
    if floor == 0.0:
        if total <= 0.0:
            return float("inf")
        return d * radius**exponent / total
    if total == 0.0:
        return d * np.log(radius / floor) / radius**d
    return d * (radius**total - floor**total) / (total * radius**d)


def _ball_average_quadrature(exponent: float, d: int, center: np.ndarray, radius: float, cells: int = 256) -> float:
    if d == 1:
        lo, hi = center[0] - radius, center[0] + radius
        points = [0.0] if lo < 0.0 < hi else None
        value, _ = integrate.quad(lambda y: abs(y) ** exponent if y != 0.0 else 0.0, lo, hi, points=points, limit=200)
        return value / (2.0 * radius)
    offsets, _ = _midpoint_lattice(radius, cells, d)
    inside = np.linalg.norm(offsets, axis=-1) < radius
    points = center + offsets[inside]
    return float(np.mean(np.linalg.norm(points, axis=-1) ** exponent))


@dataclass(frozen=True)
class APDiagnostic:
    """Ball products (avg w)(avg w^{1/(1-p)})^{p-1} and a verdict"""

    gamma: float
    p: float
    d: int
    radii: np.ndarray
    products: np.ndarray
    off_center_products: np.ndarray
    verdict: str
    supremum: float


def ap_diagnostic(
    gamma: float,
    p: float,
    d: int,
    radii: Sequence[float],
    off_center: Sequence[Tuple[Sequence[float], float]] = (),
    floor_fraction: float = 1e-3,
    trend_tolerance: float = 1e-2,
) -> APDiagnostic:
    """A_p diagnostic of the power weight |x|^gamma over a family of balls."""
    if gamma <= -d:
        raise HypothesisError("|x|^gamma is not locally integrable for gamma <= -d", {"gamma": gamma, "d": d})
    radii = np.asarray(sorted(radii), dtype=float)
    if len(radii) < 2 or radii[-1] / radii[0] < 1e3 * (1 - 1e-12):
        raise EstimationError("Origin-centered radii must span at least 3 decades", {"radii": radii.tolist()})
    dual = -gamma / (p - 1.0)

    products = np.array([_ball_average(gamma, d, r) * _ball_average(dual, d, r) ** (p - 1.0) for r in radii])
    if np.all(np.isfinite(products)):
        verdict = "finite"
    else:
        # dual weight not integrable at 0: cut below a fixed floor and watch the trend
        floor = floor_fraction * radii[0]
        products = np.array([
            _ball_average(gamma, d, r) * _ball_average(dual, d, r, floor) ** (p - 1.0) for r in radii
        ])
        growing = np.all(np.diff(products) > 0) and products[-1] > (1.0 + trend_tolerance) * products[0]
        verdict = "diverging" if growing else "finite"

    off = []
    for center, radius in off_center:
        center = np.broadcast_to(np.asarray(center, dtype=float), (d,))
        off.append(
            _ball_average_quadrature(gamma, d, center, radius)
            * _ball_average_quadrature(dual, d, center, radius) ** (p - 1.0)
        )
    off = np.asarray(off, dtype=float)
    supremum = float(np.max(np.concatenate([products, off]))) if verdict == "finite" else float("inf")
    logger.info(f"A_p diagnostic gamma={gamma}, p={p}, d={d}: {verdict} (sup {supremum:.6g})")
    return APDiagnostic(
        gamma=gamma, p=p, d=d, radii=radii, products=products, off_center_products=off,
        verdict=verdict, supremum=supremum,
    )
