"""
Drift fields: the standard catalog, mollification and the Lamperti reduction
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from flowlab.core.config import settings
from flowlab.core.exceptions import CatalogError, HypothesisError, QuadratureError

logger = logging.getLogger(__name__)

ScalarFn = Callable[[float, np.ndarray], np.ndarray]
VectorFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DriftField:
    """Bounded drift b(t, x) on R^d with structural flags.

    Points are arrays whose last axis has length d. Separable fields are
    described per component (b_i depends on x_i only) which lets
    mollification work axis by axis.
    """

    key: str
    d: int
    sup_bound: float
    autonomous: bool = True
    monotone_decreasing: bool = False
    one_sided_bound: Optional[Tuple[float, ...]] = None
    one_sided_sign: Optional[Tuple[int, ...]] = None
    discontinuities: Tuple[Tuple[float, ...], ...] = ()
    breakpoints: Tuple[Tuple[float, ...], ...] = ()
    piecewise_constant: bool = False
    params: Dict[str, Any] = field(default_factory=dict)
    components: Optional[Tuple[ScalarFn, ...]] = None
    component_derivatives: Optional[Tuple[ScalarFn, ...]] = None
    vector_fn: Optional[VectorFn] = None
    jacobian_fn: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    @property
    def separable(self) -> bool:
        return self.components is not None

    @property
    def smooth(self) -> bool:
        return self.component_derivatives is not None or self.jacobian_fn is not None

    def eval(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.separable:
            return np.stack([fn(t, x[..., i]) for i, fn in enumerate(self.components)], axis=-1)
        return self.vector_fn(t, x)

    def eval_jacobian(self, t: float, x) -> np.ndarray:
        if not self.smooth:
            raise HypothesisError(f"Drift '{self.key}' has no jacobian", {"key": self.key})
        x = np.asarray(x, dtype=float)
        if self.component_derivatives is not None:
            out = np.zeros(x.shape + (self.d,))
            for i, fn in enumerate(self.component_derivatives):
                out[..., i, i] = fn(t, x[..., i])
            return out
        return self.jacobian_fn(t, x)


def _const(value: float) -> ScalarFn:
    return lambda t, y: np.full(np.shape(y), float(value))


def _step(low_side: float, high_side: float, threshold: float) -> ScalarFn:
    return lambda t, y: np.where(y < threshold, float(low_side), float(high_side))


def _one_sided(levels: Sequence[float]) -> Tuple[Optional[float], Optional[int]]:
    lo, hi = min(levels), max(levels)
    if lo > 0:
        return lo, 1
    if hi < 0:
        return -hi, -1
    return None, None


def _component_flags(per_component: Sequence[Sequence[float]]):
    bounds, signs = [], []
    for levels in per_component:
        m, sign = _one_sided(levels)
        if m is None:
            return None, None
        bounds.append(m)
        signs.append(sign)
    return tuple(bounds), tuple(signs)


def _positive_int(params: Dict[str, Any], name: str, default: int) -> int:
    value = params.get(name, default)
    if int(value) != value or value < 1:
        raise CatalogError(f"Parameter '{name}' must be a positive integer", {name: value})
    return int(value)


def _require_1d(key: str, d: int):
    if d != 1:
        raise CatalogError(f"Catalog field '{key}' is one-dimensional", {"d": d})


def _zero(params):
    d = _positive_int(params, "d", 1)
    return DriftField(
        key="zero", d=d, sup_bound=0.0, monotone_decreasing=d == 1, piecewise_constant=True,
        components=tuple(_const(0.0) for _ in range(d)),
        component_derivatives=tuple(_const(0.0) for _ in range(d)),
        params={"d": d},
    )


def _constant(params):
    d = _positive_int(params, "d", 1)
    value = np.broadcast_to(np.asarray(params.get("value", 1.0), dtype=float), (d,)).copy()
    bound, sign = _component_flags([[v] for v in value])
    return DriftField(
        key="constant", d=d, sup_bound=float(np.linalg.norm(value)), monotone_decreasing=d == 1, piecewise_constant=True,
        one_sided_bound=bound, one_sided_sign=sign,
        components=tuple(_const(v) for v in value),
        component_derivatives=tuple(_const(0.0) for _ in range(d)),
        params={"d": d, "value": value.tolist()},
    )


def _linear_ou(params):
    d = _positive_int(params, "d", 1)
    rate = float(params.get("rate", 1.0))
    clip = float(params.get("clip", 10.0))
    if rate < 0 or clip <= 0:
        raise CatalogError("linear_ou needs rate >= 0 and clip > 0", {"rate": rate, "clip": clip})

    def component(t, y):
        return -rate * np.clip(y, -clip, clip)

    def derivative(t, y):
        return np.where(np.abs(y) < clip, -rate, 0.0)

    return DriftField(
        key="linear_ou", d=d, sup_bound=rate * clip * np.sqrt(d), monotone_decreasing=d == 1,
        breakpoints=tuple((-clip, clip) for _ in range(d)),
        components=tuple(component for _ in range(d)),
        component_derivatives=tuple(derivative for _ in range(d)),
        params={"d": d, "rate": rate, "clip": clip},
    )


def _sign(params):
    d = _positive_int(params, "d", 1)
    _require_1d("sign", d)
    level = float(params.get("level", 1.0))
    if level <= 0:
        raise CatalogError("sign needs a positive level", {"level": level})
    return DriftField(
        key="sign", d=1, sup_bound=level, monotone_decreasing=True, piecewise_constant=True,
        discontinuities=((0.0,),), breakpoints=((0.0,),),
        components=(_step(level, -level, 0.0),),
        params={"d": 1, "level": level},
    )


def _step_monotone(params):
    d = _positive_int(params, "d", 1)
    _require_1d("step_monotone", d)
    levels = tuple(float(v) for v in params.get("levels", (2.0, 1.0)))
    threshold = float(params.get("threshold", 0.0))
    if len(levels) != 2:
        raise CatalogError("step_monotone needs exactly two levels", {"levels": levels})
    if levels[0] < levels[1]:
        raise CatalogError("step_monotone levels must be nonincreasing", {"levels": levels})
    bound, sign = _component_flags([levels])
    return DriftField(
        key="step_monotone", d=1, sup_bound=max(abs(v) for v in levels), monotone_decreasing=True,
        piecewise_constant=True,
        one_sided_bound=bound, one_sided_sign=sign,
        discontinuities=((threshold,),), breakpoints=((threshold,),),
        components=(_step(levels[0], levels[1], threshold),),
        params={"d": 1, "levels": list(levels), "threshold": threshold},
    )


def _componentwise_step(params):
    d = _positive_int(params, "d", 2)
    levels = [tuple(float(v) for v in pair) for pair in params.get("levels", [(2.0, 1.0)] * d)]
    thresholds = [float(v) for v in params.get("thresholds", [0.0] * d)]
    if len(levels) != d or len(thresholds) != d or any(len(pair) != 2 for pair in levels):
        raise CatalogError(
            "componentwise_step needs one (left, right) level pair and one threshold per component",
            {"d": d, "levels": levels, "thresholds": thresholds},
        )
    bound, sign = _component_flags(levels)
    sup = float(np.sqrt(sum(max(abs(a), abs(b)) ** 2 for a, b in levels)))
    return DriftField(
        key="componentwise_step", d=d, sup_bound=sup, piecewise_constant=True,
        monotone_decreasing=d == 1 and levels[0][0] >= levels[0][1],
        one_sided_bound=bound, one_sided_sign=sign,
        discontinuities=tuple((c,) for c in thresholds), breakpoints=tuple((c,) for c in thresholds),
        components=tuple(_step(a, b, c) for (a, b), c in zip(levels, thresholds)),
        params={"d": d, "levels": [list(p) for p in levels], "thresholds": thresholds},
    )


def _tanh_step(params):
    d = _positive_int(params, "d", 1)
    _require_1d("tanh_step", d)
    left, right = (float(v) for v in params.get("levels", (2.0, 1.0)))
    threshold = float(params.get("threshold", 0.0))
    width = float(params.get("width", 0.25))
    if left < right or width <= 0:
        raise CatalogError("tanh_step needs nonincreasing levels and width > 0", {"levels": (left, right), "width": width})
    mid, half = 0.5 * (left + right), 0.5 * (left - right)

    def component(t, y):
        return mid - half * np.tanh((y - threshold) / width)

    def derivative(t, y):
        return -half / width / np.cosh((y - threshold) / width) ** 2

    bound, sign = _component_flags([(left, right)])
    return DriftField(
        key="tanh_step", d=1, sup_bound=max(abs(left), abs(right)), monotone_decreasing=True,
        one_sided_bound=bound, one_sided_sign=sign,
        components=(component,), component_derivatives=(derivative,),
        params={"d": 1, "levels": [left, right], "threshold": threshold, "width": width},
    )


def _sine(params):
    d = _positive_int(params, "d", 1)
    amplitude = float(params.get("amplitude", 1.0))
    frequency = float(params.get("frequency", 1.0))
    return DriftField(
        key="sine", d=d, sup_bound=abs(amplitude) * np.sqrt(d),
        components=tuple((lambda t, y: amplitude * np.sin(frequency * y)) for _ in range(d)),
        component_derivatives=tuple(
            (lambda t, y: amplitude * frequency * np.cos(frequency * y)) for _ in range(d)
        ),
        params={"d": d, "amplitude": amplitude, "frequency": frequency},
    )


def _gaussian_bump(params):
    d = _positive_int(params, "d", 1)
    amplitude = float(params.get("amplitude", 1.0))
    width = float(params.get("width", 1.0))
    center = np.broadcast_to(np.asarray(params.get("center", 0.0), dtype=float), (d,)).copy()
    if width <= 0:
        raise CatalogError("gaussian_bump needs width > 0", {"width": width})

    def profile(x):
        return amplitude * np.exp(-np.sum((x - center) ** 2, axis=-1) / (2.0 * width**2))

    def vector_fn(t, x):
        return np.repeat(profile(x)[..., None], d, axis=-1)

    def jacobian_fn(t, x):
        grad = -(x - center) / width**2 * profile(x)[..., None]
        return np.repeat(grad[..., None, :], d, axis=-2)

    if d == 1:
        return DriftField(
            key="gaussian_bump", d=1, sup_bound=abs(amplitude),
            components=(lambda t, y: vector_fn(t, y[..., None])[..., 0],),
            component_derivatives=(lambda t, y: jacobian_fn(t, y[..., None])[..., 0, 0],),
            params={"d": 1, "amplitude": amplitude, "width": width, "center": center.tolist()},
        )
    return DriftField(
        key="gaussian_bump", d=d, sup_bound=abs(amplitude) * np.sqrt(d),
        vector_fn=vector_fn, jacobian_fn=jacobian_fn,
        params={"d": d, "amplitude": amplitude, "width": width, "center": center.tolist()},
    )


def _time_periodic(params):
    d = _positive_int(params, "d", 1)
    amplitude = float(params.get("amplitude", 1.0))
    omega = float(params.get("omega", 2.0 * np.pi))
    return DriftField(
        key="time_periodic", d=d, sup_bound=abs(amplitude) * np.sqrt(d), autonomous=False,
        components=tuple((lambda t, y: np.full(np.shape(y), amplitude * np.cos(omega * t))) for _ in range(d)),
        component_derivatives=tuple(_const(0.0) for _ in range(d)),
        params={"d": d, "amplitude": amplitude, "omega": omega},
    )


CATALOG: Dict[str, Tuple[Callable[[Dict[str, Any]], DriftField], str, Tuple[str, ...]]] = {
    "zero": (_zero, "b = 0", ("d",)),
    "constant": (_constant, "b = value", ("d", "value")),
    "linear_ou": (_linear_ou, "b = -rate * clip(x, -clip, clip)", ("d", "rate", "clip")),
    "sign": (_sign, "b = level for y < 0, -level for y >= 0", ("d", "level")),
    "step_monotone": (_step_monotone, "b = levels[0] below threshold, levels[1] above", ("d", "levels", "threshold")),
    "componentwise_step": (
        _componentwise_step,
        "b_i = levels[i][0] for x_i < thresholds[i], levels[i][1] otherwise",
        ("d", "levels", "thresholds"),
    ),
    "tanh_step": (_tanh_step, "smooth decreasing step between levels", ("d", "levels", "threshold", "width")),
    "sine": (_sine, "b_i = amplitude * sin(frequency * x_i)", ("d", "amplitude", "frequency")),
    "gaussian_bump": (_gaussian_bump, "b_i = amplitude * exp(-|x - center|^2 / 2 width^2)", ("d", "amplitude", "width", "center")),
    "time_periodic": (_time_periodic, "b_i = amplitude * cos(omega * t)", ("d", "amplitude", "omega")),
}


def make_standard_fields(catalog_key: str, params: Optional[Dict[str, Any]] = None) -> DriftField:
    """Build a catalog drift field from its key and parameters."""
    params = dict(params or {})
    if catalog_key not in CATALOG:
        raise CatalogError(f"Unknown drift catalog key '{catalog_key}'", {"known": sorted(CATALOG)})
    builder, _, allowed = CATALOG[catalog_key]
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise CatalogError(f"Unknown parameters for '{catalog_key}': {unknown}", {"allowed": list(allowed)})
    drift = builder(params)
    logger.debug(f"Built drift '{catalog_key}' with sup bound {drift.sup_bound:.6g}")
    return drift


def describe_catalog() -> Dict[str, Dict[str, Any]]:
    """Catalog keys with their formulas and accepted parameters"""
    return {key: {"formula": formula, "params": list(names)} for key, (_, formula, names) in CATALOG.items()}


def sample_sup_check(drift: DriftField, radius: float = 5.0, samples: int = 4001, times: Sequence[float] = (0.0, 0.5, 1.0)) -> float:
    """Largest sampled |b(t, x)| over a box; compare against sup_bound."""
    rng = np.random.default_rng(0)
    grid = np.linspace(-radius, radius, samples)
    points = np.stack([grid] * drift.d, axis=-1) if drift.d == 1 else rng.uniform(-radius, radius, (samples, drift.d))
    return float(max(np.linalg.norm(drift.eval(t, points), axis=-1).max() for t in times))


# Mollification


def _bump(z):
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1.0
    out = np.zeros_like(z)
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


def _bump_derivative(z):
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1.0
    out = np.zeros_like(z)
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi**2)) * (-2.0 * zi / (1.0 - zi**2) ** 2)
    return out


def _radial_bump(z):
    """exp(-1/(1-|z|^2)) on the unit ball, z of shape (..., d)"""
    r2 = np.sum(np.asarray(z, dtype=float) ** 2, axis=-1)
    inside = r2 < 1.0
    out = np.zeros_like(r2)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def _radial_bump_gradient(z):
    z = np.asarray(z, dtype=float)
    r2 = np.sum(z**2, axis=-1)
    inside = r2 < 1.0
    out = np.zeros_like(z)
    ri = r2[inside]
    out[inside] = (np.exp(-1.0 / (1.0 - ri)) * (-2.0 / (1.0 - ri) ** 2))[:, None] * z[inside]
    return out


@dataclass(frozen=True)
class MollifierFamily:
    """Family b_n = b * eta_{1/n} of smooth approximations of a base drift.

    The C-infinity bump exp(-1/(1-z^2)) is integrated by Gauss-Legendre on
    each piece of its support between declared breakpoints of the base, so
    b_n stays smooth in x even for step drifts. Drifts that are not
    componentwise use the radial bump exp(-1/(1-|z|^2)) on the unit ball,
    integrated on the tensor Gauss-Legendre grid of the cube around it.
    """

    base: DriftField
    order: int = 64

    def __post_init__(self):
        if self.order < settings.MIN_QUADRATURE_ORDER:
            raise QuadratureError(
                f"Mollifier quadrature order {self.order} below minimum {settings.MIN_QUADRATURE_ORDER}",
                {"order": self.order},
            )
        nodes, weights = np.polynomial.legendre.leggauss(self.order)
        object.__setattr__(self, "_nodes", nodes)
        object.__setattr__(self, "_weights", weights)
        # normalization constant of the bump, once
        wide_nodes, wide_weights = np.polynomial.legendre.leggauss(4 * self.order)
        object.__setattr__(self, "_mass", float(np.sum(wide_weights * _bump(wide_nodes))))

    def _pieces(self, y: np.ndarray, eps: float, cuts: Tuple[float, ...]):
        """Quadrature nodes z (..., q) and weights on [-1, 1] split at (y - c)/eps."""
        split = np.sort(np.clip((y[..., None] - np.asarray(cuts, dtype=float)) / eps, -1.0, 1.0), axis=-1)
        ends = np.concatenate([np.full(y.shape + (1,), -1.0), split, np.full(y.shape + (1,), 1.0)], axis=-1)
        a, b = ends[..., :-1, None], ends[..., 1:, None]
        z = 0.5 * (a + b) + 0.5 * (b - a) * self._nodes
        w = 0.5 * (b - a) * self._weights
        return z.reshape(y.shape + (-1,)), w.reshape(y.shape + (-1,))

    def _convolve_component(
        self, fn: ScalarFn, t: float, y: np.ndarray, eps: float, cuts, derivative: bool, piecewise_constant: bool = False
    ):
        if piecewise_constant:
            # away from every cut the bump sees a constant
            near = np.zeros(y.shape, dtype=bool)
            for c in cuts:
                near |= np.abs(y - c) < eps
            out = np.zeros(y.shape) if derivative else np.asarray(fn(t, y), dtype=float).copy()
            if near.any():
                out[near] = self._convolve_component(fn, t, y[near], eps, cuts, derivative)
            return out
        z, w = self._pieces(y, eps, cuts)
        values = fn(t, y[..., None] - eps * z)
        if derivative:
            return np.sum(w * _bump_derivative(z) * values, axis=-1) / (self._mass * eps)
        kernel = w * _bump(z)
        return np.sum(kernel * values, axis=-1) / np.sum(kernel, axis=-1)

    def _tensor_nodes(self, d: int):
        grids = np.meshgrid(*([self._nodes] * d), indexing="ij")
        z = np.stack([g.ravel() for g in grids], axis=-1)
        w = np.prod(np.stack(np.meshgrid(*([self._weights] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=-1)
        return z, w

    def eval_n(self, n: int, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        eps = 1.0 / n
        base = self.base
        if base.separable:
            cuts = base.breakpoints or ((),) * base.d
            return np.stack(
                [
                    self._convolve_component(fn, t, x[..., i], eps, cuts[i], False, base.piecewise_constant)
                    for i, fn in enumerate(base.components)
                ],
                axis=-1,
            )
        z, w = self._tensor_nodes(base.d)
        kernel = w * _radial_bump(z)
        values = base.eval(t, x[..., None, :] - eps * z)
        return np.sum(kernel[:, None] * values, axis=-2) / np.sum(kernel)

    def eval_n_jacobian(self, n: int, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        eps = 1.0 / n
        base = self.base
        if base.separable:
            cuts = base.breakpoints or ((),) * base.d
            out = np.zeros(x.shape + (base.d,))
            for i, fn in enumerate(base.components):
                out[..., i, i] = self._convolve_component(fn, t, x[..., i], eps, cuts[i], True, base.piecewise_constant)
            return out
        z, w = self._tensor_nodes(base.d)
        mass = np.sum(w * _radial_bump(z))
        gradient = _radial_bump_gradient(z)
        values = base.eval(t, x[..., None, :] - eps * z)
        out = np.zeros(x.shape + (base.d,))
        for j in range(base.d):
            kernel = w * gradient[:, j]
            out[..., :, j] = np.sum(kernel[:, None] * values, axis=-2) / (mass * eps)
        return out

    def member(self, n: int) -> DriftField:
        if int(n) != n or n < 1:
            raise CatalogError("Mollification index must be a positive integer", {"n": n})
        n = int(n)
        base = self.base
        shared = dict(
            key=f"{base.key}@n{n}", d=base.d, sup_bound=base.sup_bound, autonomous=base.autonomous,
            monotone_decreasing=base.monotone_decreasing,
            one_sided_bound=base.one_sided_bound, one_sided_sign=base.one_sided_sign,
            params={**base.params, "mollification": n},
        )
        if base.separable:
            eps = 1.0 / n
            pc = base.piecewise_constant
            cuts = base.breakpoints or ((),) * base.d
            components = tuple(
                (lambda t, y, fn=fn, c=c: self._convolve_component(fn, t, np.asarray(y, dtype=float), eps, c, False, pc))
                for fn, c in zip(base.components, cuts)
            )
            derivatives = tuple(
                (lambda t, y, fn=fn, c=c: self._convolve_component(fn, t, np.asarray(y, dtype=float), eps, c, True, pc))
                for fn, c in zip(base.components, cuts)
            )
            return DriftField(**shared, components=components, component_derivatives=derivatives)
        return DriftField(
            **shared,
            vector_fn=lambda t, x: self.eval_n(n, t, x),
            jacobian_fn=lambda t, x: self.eval_n_jacobian(n, t, x),
        )


def mollify(base: DriftField, n: int, order: Optional[int] = None) -> DriftField:
    """Smooth member b_n of the mollifier family of `base` (bump width 1/n)."""
    family = MollifierFamily(base=base, order=order or settings.MOLLIFIER_QUADRATURE_ORDER)
    return family.member(n)


# Lamperti reduction


@dataclass(frozen=True)
class LampertiTransform:
    """Lambda(x) = int_0^x dy / sigma(y) on a bounded domain, its inverse and b_*"""

    sigma: Callable[[np.ndarray], np.ndarray]
    domain: Tuple[float, float]
    table_x: np.ndarray
    table_lambda: np.ndarray
    drift: Optional[DriftField] = None
    tol: float = 1e-12

    @property
    def image(self) -> Tuple[float, float]:
        return float(self.table_lambda[0]), float(self.table_lambda[-1])

    def forward(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), *self.domain)
        k = np.clip(np.searchsorted(self.table_x, x, side="right") - 1, 0, len(self.table_x) - 2)
        left = self.table_x[k]
        nodes, weights = np.polynomial.legendre.leggauss(16)
        half = 0.5 * (x - left)
        y = left[..., None] + half[..., None] * (nodes + 1.0)
        partial = half * np.sum(weights / self.sigma(y), axis=-1)
        return self.table_lambda[k] + partial

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        lo = np.full(z.shape, self.domain[0])
        hi = np.full(z.shape, self.domain[1])
        # bisection; Lambda is strictly increasing
        while np.max(hi - lo, initial=0.0) > self.tol:
            mid = 0.5 * (lo + hi)
            below = self.forward(mid) < z
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(mid == 0.5 * (lo + hi)):
                break
        return 0.5 * (lo + hi)


def lamperti_transform(
    b: DriftField,
    sigma: Callable[[np.ndarray], np.ndarray],
    domain: Tuple[float, float],
    sigma_prime: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    sigma_min: Optional[float] = None,
    table_size: int = 257,
) -> LampertiTransform:
    """Reduce dX = b dt + sigma(X) dB to additive noise via Lambda.

    Returns the transform whose `drift` is b_*(z) = b(y)/sigma(y) - sigma'(y)/2
    at y = Lambda^{-1}(z).
    """
    if b.d != 1:
        raise HypothesisError("Lamperti reduction is one-dimensional", {"d": b.d})
    lo, hi = (float(v) for v in domain)
    if not hi > lo or not lo <= 0.0 <= hi:
        raise QuadratureError("Lamperti domain must be an interval containing 0", {"domain": (lo, hi)})

    probe = np.linspace(lo, hi, 8 * (table_size - 1) + 1)
    sigma_values = np.asarray(sigma(probe), dtype=float)
    if np.any(sigma_values <= 0.0):
        raise QuadratureError("sigma vanishes or changes sign on the domain", {"min_sigma": float(sigma_values.min())})
    if sigma_min is not None and sigma_values.min() < sigma_min:
        raise QuadratureError(
            "sigma dips below sigma_min; Lambda is not uniformly invertible",
            {"min_sigma": float(sigma_values.min()), "sigma_min": sigma_min},
        )
    floor = float(sigma_values.min()) if sigma_min is None else float(sigma_min)

    if sigma_prime is None:
        step = 1e-6

        def sigma_prime(y):
            return (sigma(y + step) - sigma(y - step)) / (2.0 * step)

    table_x = np.unique(np.concatenate([np.linspace(lo, hi, table_size), [0.0]]))
    cells = [integrate.quad(lambda y: 1.0 / float(sigma(np.asarray(y))), a, c, epsabs=1e-14, epsrel=1e-13)[0]
             for a, c in zip(table_x[:-1], table_x[1:])]
    cumulative = np.concatenate([[0.0], np.cumsum(cells)])
    table_lambda = cumulative - cumulative[np.searchsorted(table_x, 0.0)]
    if np.any(np.diff(table_lambda) <= 0.0):
        raise QuadratureError("Lambda is not strictly increasing on the domain", {"domain": (lo, hi)})

    transform = LampertiTransform(
        sigma=sigma, domain=(lo, hi), table_x=table_x, table_lambda=table_lambda, tol=settings.BISECTION_TOL
    )
    sigma_prime_sup = float(np.max(np.abs(sigma_prime(probe))))

    def transformed(t, z):
        y = transform.inverse(z)
        return b.eval(t, y[..., None])[..., 0] / sigma(y) - 0.5 * sigma_prime(y)

    drift = DriftField(
        key=f"lamperti[{b.key}]", d=1, sup_bound=b.sup_bound / floor + 0.5 * sigma_prime_sup,
        autonomous=b.autonomous, components=(transformed,),
        params={"base": b.key, "domain": [lo, hi]},
    )
    object.__setattr__(transform, "drift", drift)
    logger.info(f"Lamperti transform on [{lo}, {hi}] with image {transform.image}")
    return transform
