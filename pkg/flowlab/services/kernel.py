"""
Gaussian kernel estimates, iterated simplex integrals and allowed-string expansions
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from math import factorial
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate, special, stats

from flowlab.core.config import settings
from flowlab.core.exceptions import EstimationError, HypothesisError, QuadratureError
from flowlab.core.rng import generator, stream_id_for
from flowlab.services.fields import DriftField

logger = logging.getLogger(__name__)

MAX_ORDER = 3
MC_CHUNK = 1 << 15
# flattened (time nodes x space nodes) evaluated at once
_BATCH = 1 << 21


@dataclass(frozen=True)
class HeatKernel:
    """P(t, z) = (2 pi t)^{-d/2} exp(-|z|^2 / 2t) with its first two z-derivatives"""

    d: int = 1

    def eval(self, t: float, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (2.0 * np.pi * t) ** (-self.d / 2.0) * np.exp(-np.sum(z**2, axis=-1) / (2.0 * t))

    def gradient(self, t: float, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return -z / t * self.eval(t, z)[..., None]

    def hessian(self, t: float, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        outer = z[..., :, None] * z[..., None, :] / t**2 - np.eye(self.d) / t
        return outer * self.eval(t, z)[..., None, None]

    def mass(self, t: float) -> float:
        """Total mass as the d-th power of the one-dimensional integral."""
        if t <= 0:
            raise HypothesisError("Heat kernel time must be positive", {"t": t})
        one_d = HeatKernel(1)
        half, _ = integrate.quad(lambda z: float(one_d.eval(t, np.array([z]))), 0.0, np.inf, epsabs=1e-13, epsrel=1e-12)
        return float((2.0 * half) ** self.d)


def kernel_l1_derivative(t: float, order: int, indices: Sequence[int] = (0, 0)) -> float:
    """L1 norm of a first or second z-derivative of the heat kernel.

    First order is exact, sqrt(2 / (pi t)). Second order reduces to one-dimensional
    integrals over the coordinates the derivative touches and runs through quad.
    """
    if t <= 0:
        raise HypothesisError("Heat kernel time must be positive", {"t": t})
    if order == 1:
        return float(np.sqrt(2.0 / (np.pi * t)))
    if order != 2:
        raise HypothesisError("Derivative order must be 1 or 2", {"order": order})
    one_d = HeatKernel(1)

    def density(z):
        return float(one_d.eval(t, np.array([z])))

    if indices[0] != indices[1]:
        first, _ = integrate.quad(lambda z: z / t * density(z), 0.0, np.inf, epsabs=1e-14, epsrel=1e-12)
        return float((2.0 * first) ** 2)
    root = np.sqrt(t)

    def curvature(z):
        return abs(z**2 / t**2 - 1.0 / t) * density(z)

    inner, _ = integrate.quad(curvature, 0.0, root, epsabs=1e-14, epsrel=1e-12)
    outer, _ = integrate.quad(curvature, root, np.inf, epsabs=1e-14, epsrel=1e-12)
    return float(2.0 * (inner + outer))


# Letters: ("P",), ("D", i) or ("DD", i, i + 1) with 1-based b indices.
Letter = Tuple[Any, ...]


@dataclass(frozen=True)
class StringTerm:
    sign: int
    letters: Tuple[Letter, ...]

    @property
    def n(self) -> int:
        return len(self.letters)

    def render(self) -> str:
        names = {"P": lambda l: "P", "D": lambda l: f"D{l[1]}P", "DD": lambda l: f"D{l[1]}D{l[2]}P"}
        return ("+" if self.sign > 0 else "-") + "[" + " . ".join(names[l[0]](l) for l in self.letters) + "]"


def _shift(letter: Letter) -> Letter:
    return (letter[0],) + tuple(i + 1 for i in letter[1:])


def string_expansion(n: int) -> List[StringTerm]:
    """Signed allowed strings whose I_S sum to J_n, by repeated integration by parts."""
    if n not in (1, 2, 3):
        raise HypothesisError("String expansions are available for n in 1..3", {"n": n})
    terms = [StringTerm(sign=-1, letters=(("D", 1),))]
    for _ in range(n - 1):
        grown = []
        for term in terms:
            shifted = tuple(_shift(letter) for letter in term.letters)
            grown.append(StringTerm(sign=-term.sign, letters=(("D", 1),) + shifted))
            head = shifted[0]
            tilde = (("D", 1),) if head[0] == "P" else (("DD", 1, head[1]),)
            grown.append(StringTerm(sign=term.sign, letters=(("P",),) + tilde + shifted[1:]))
        terms = grown
    return terms


def allowed(term: StringTerm) -> bool:
    """Every b index is differentiated once, first derivatives ascend, the rest reads P . DD . P . DD ..."""
    derivatives: List[int] = []
    firsts: List[int] = []
    rest: List[Letter] = []
    for letter in term.letters:
        if letter[0] == "D":
            firsts.append(letter[1])
            derivatives.append(letter[1])
        elif letter[0] == "DD":
            if letter[2] != letter[1] + 1:
                return False
            derivatives.extend(letter[1:])
            rest.append(letter)
        elif letter[0] == "P":
            rest.append(letter)
        else:
            return False
    if sorted(derivatives) != list(range(1, term.n + 1)):
        return False
    if firsts != sorted(firsts):
        return False
    if len(rest) % 2:
        return False
    return all(rest[k][0] == ("P" if k % 2 == 0 else "DD") for k in range(len(rest)))


# Iterated integrals


@dataclass(frozen=True)
class IteratedIntegral:
    n: int
    alpha: Tuple[int, ...]
    t0: float
    t: float
    estimate: float
    se: float
    bound: float
    c_used: float
    method: str

    def to_record(self) -> Dict[str, Any]:
        return {
            "n": self.n, "alpha": list(self.alpha), "t0": self.t0, "t": self.t,
            "estimate": self.estimate, "se": self.se, "bound": self.bound, "C_used": self.c_used,
        }


def bound_value(sup_norms: Sequence[float], t0: float, t: float, constant: Optional[float] = None) -> float:
    """C^n prod ||b_i|| (t - t0)^{n/2} / Gamma(n/2 + 1)"""
    constant = settings.KERNEL_CONSTANT if constant is None else constant
    n = len(sup_norms)
    return float(constant**n * np.prod(sup_norms) * (t - t0) ** (n / 2.0) / special.gamma(n / 2.0 + 1.0))


def _scalar(drift: DriftField, time: np.ndarray, points: np.ndarray, alpha: int, component: int, derivative: bool):
    """b_i or D^alpha b_i (one component) at points (T, G, d) with per-row times (T,)."""

    def at(s, y):
        if derivative:
            return drift.eval_jacobian(s, y)[..., component, alpha]
        return drift.eval(s, y)[..., component]

    if drift.autonomous:
        return at(0.0, points)
    return np.stack([at(float(s), points[k]) for k, s in enumerate(time)])


def _multiplier(letter: Letter, axes: Sequence[int], xi: np.ndarray, gap: np.ndarray) -> np.ndarray:
    """Kernel letter divided by P, written in the standard normal node xi = w / sqrt(gap)."""
    if letter[0] == "P":
        return np.ones(np.broadcast_shapes(xi.shape[:-1], gap.shape))
    if letter[0] == "D":
        a = axes[letter[1] - 1]
        return -xi[..., a] / np.sqrt(gap)
    a, b = axes[letter[1] - 1], axes[letter[2] - 1]
    return (xi[..., a] * xi[..., b] - float(a == b)) / gap


def _simplex_rule(n: int, t0: float, t: float, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ordered times t0 < t_1 < ... < t_n < t and weights from a nested Gauss-Legendre map."""
    u, w = np.polynomial.legendre.leggauss(nodes)
    u, w = 0.5 * (u + 1.0), 0.5 * w
    grids = np.array(list(product(range(nodes), repeat=n)))
    times = np.empty(grids.shape)
    weights = np.ones(len(grids))
    previous = np.full(len(grids), float(t0))
    for i in range(n):
        span = t - previous
        times[:, i] = previous + span * u[grids[:, i]]
        weights *= span * w[grids[:, i]]
        previous = times[:, i]
    return times, weights


def _hermite_rule(n: int, d: int, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Standard normal nodes (G, n, d) and weights for n independent d-dim Gaussians."""
    x, w = hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.array(list(product(range(nodes), repeat=n * d)))
    return x[grids].reshape(-1, n, d), np.prod(w[grids], axis=-1)


def _chain_integral(
    b_list: Sequence[DriftField],
    letters: Sequence[Letter],
    alpha: Sequence[int],
    components: Sequence[int],
    derivative: bool,
    t0: float,
    t: float,
    x: np.ndarray,
) -> float:
    """int_simplex int prod f_i(t_i, x + z_i) S_i(t_i - t_{i-1}, z_i - z_{i-1}) dz dt by tensor quadrature."""
    n, d = len(b_list), b_list[0].d
    if n * d > 4:
        raise QuadratureError("Tensor quadrature is limited to n * d <= 4; use monte_carlo", {"n": n, "d": d})
    times, time_weights = _simplex_rule(n, t0, t, settings.SIMPLEX_NODES)
    xi, space_weights = _hermite_rule(n, d, settings.GAUSS_HERMITE_NODES)
    chunk = max(1, _BATCH // len(space_weights))
    total = 0.0
    for start in range(0, len(time_weights), chunk):
        tc = times[start : start + chunk]
        gaps = np.diff(np.concatenate([np.full((len(tc), 1), t0), tc], axis=1), axis=1)
        steps = np.sqrt(gaps)[:, None, :, None] * xi[None]
        z = np.cumsum(steps, axis=2)
        value = np.ones((len(tc), len(space_weights)))
        for i, drift in enumerate(b_list):
            value *= _scalar(drift, tc[:, i], x + z[:, :, i, :], alpha[i], components[i], derivative)
            value *= _multiplier(letters[i], alpha, xi[None, :, i, :], gaps[:, i][:, None])
        total += float(time_weights[start : start + chunk] @ (value @ space_weights))
    return total


def _monte_carlo(
    b_list: Sequence[DriftField],
    alpha: Sequence[int],
    components: Sequence[int],
    t0: float,
    t: float,
    x: np.ndarray,
    budget: int,
    seed: int,
    threads: int,
) -> Tuple[float, float]:
    """Uniform ordered simplex times with Brownian marginals; returns mean and SE."""
    n, d = len(b_list), b_list[0].d
    volume = (t - t0) ** n / factorial(n)
    chunks = [(i, min(MC_CHUNK, budget - i * MC_CHUNK)) for i in range(-(-budget // MC_CHUNK))]

    def run(job):
        index, size = job
        rng = generator(seed, stream_id_for("iterated_integral", index))
        times = t0 + np.sort(rng.uniform(0.0, t - t0, (size, n)), axis=1)
        gaps = np.diff(np.concatenate([np.full((size, 1), t0), times], axis=1), axis=1)
        z = np.cumsum(np.sqrt(gaps)[..., None] * rng.standard_normal((size, n, d)), axis=1)
        value = np.full(size, volume)
        for i, drift in enumerate(b_list):
            if drift.autonomous:
                value *= drift.eval_jacobian(0.0, x + z[:, i])[:, components[i], alpha[i]]
            else:
                value *= np.array([
                    drift.eval_jacobian(float(s), x + z[k, i])[components[i], alpha[i]] for k, s in enumerate(times[:, i])
                ])
        return value.sum(), (value**2).sum()

    with ThreadPoolExecutor(max_workers=threads) as pool:
        sums = list(pool.map(run, chunks))
    first = sum(s for s, _ in sums)
    second = sum(q for _, q in sums)
    mean = first / budget
    variance = max(second / budget - mean**2, 0.0) * budget / (budget - 1)
    return float(mean), float(np.sqrt(variance / budget))


def _check_family(b_list: Sequence[DriftField], alpha: Sequence[int], t0: float, t: float) -> None:
    n = len(b_list)
    if n < 1 or n > MAX_ORDER:
        raise HypothesisError("Iterated integrals are available for n in 1..3", {"n": n})
    if len(alpha) != n:
        raise HypothesisError("One derivative index per field", {"n": n, "alpha": list(alpha)})
    if not t > t0 >= 0:
        raise HypothesisError("Need t > t0 >= 0", {"t0": t0, "t": t})
    d = b_list[0].d
    for drift in b_list:
        if not drift.smooth:
            raise HypothesisError(f"Drift '{drift.key}' has no analytic derivative", {"key": drift.key})
        if drift.d != d:
            raise HypothesisError("All fields must share one dimension", {"d": [b.d for b in b_list]})
    if any(not 0 <= a < d for a in alpha):
        raise HypothesisError("Derivative index out of range", {"alpha": list(alpha), "d": d})


def iterated_integral(
    b_list: Sequence[DriftField],
    alpha: Sequence[int],
    t0: float,
    t: float,
    x=None,
    method: str = "quadrature",
    budget: int = 200_000,
    components: Optional[Sequence[int]] = None,
    constant: Optional[float] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> IteratedIntegral:
    """E int_{t0 < t_1 < ... < t_n < t} prod D^{alpha_i} b_i(t_i, x + B(t_i)) dt with B(t0) = 0.

    `alpha[i]` is the axis differentiated in b_i and `components[i]` (default alpha[i])
    picks the scalar component of b_i.
    """
    b_list = list(b_list)
    alpha = tuple(int(a) for a in alpha)
    _check_family(b_list, alpha, t0, t)
    d = b_list[0].d
    x = np.zeros(d) if x is None else np.broadcast_to(np.asarray(x, dtype=float), (d,))
    components = alpha if components is None else tuple(components)
    if method == "quadrature":
        letters = [("P",)] * len(b_list)
        estimate, se = _chain_integral(b_list, letters, alpha, components, True, t0, t, x), 0.0
    elif method == "monte_carlo":
        if budget < 2:
            raise EstimationError("Monte-Carlo budget must be at least 2", {"budget": budget})
        estimate, se = _monte_carlo(
            b_list, alpha, components, t0, t, x, budget,
            settings.DEFAULT_SEED if seed is None else seed, threads or settings.THREADS,
        )
    else:
        raise HypothesisError(f"Unknown integration method '{method}'", {"method": method})
    c_used = settings.KERNEL_CONSTANT if constant is None else constant
    bound = bound_value([b.sup_bound for b in b_list], t0, t, c_used)
    logger.debug(f"J_{len(b_list)}{list(alpha)} on [{t0}, {t}] = {estimate:.6g} +- {se:.2g} (bound {bound:.4g})")
    return IteratedIntegral(
        n=len(b_list), alpha=alpha, t0=t0, t=t, estimate=estimate, se=se, bound=bound, c_used=c_used, method=method
    )


@dataclass(frozen=True)
class ExpansionCheck:
    direct: float
    expanded: float
    term_values: List[float]
    terms: List[StringTerm]

    @property
    def discrepancy(self) -> float:
        scale = max(abs(self.direct), abs(self.expanded))
        return 0.0 if scale == 0.0 else abs(self.direct - self.expanded) / scale


def string_expansion_numeric_check(
    b_list: Sequence[DriftField],
    alpha: Sequence[int],
    t0: float,
    t: float,
    x=None,
    components: Optional[Sequence[int]] = None,
) -> ExpansionCheck:
    """J_n computed directly against sum_j eps_j I_{S^j}, both by tensor quadrature."""
    b_list = list(b_list)
    alpha = tuple(int(a) for a in alpha)
    if len(b_list) > 2:
        raise HypothesisError("The numeric expansion check covers n <= 2", {"n": len(b_list)})
    _check_family(b_list, alpha, t0, t)
    d = b_list[0].d
    x = np.zeros(d) if x is None else np.broadcast_to(np.asarray(x, dtype=float), (d,))
    components = alpha if components is None else tuple(components)
    direct = _chain_integral(b_list, [("P",)] * len(b_list), alpha, components, True, t0, t, x)
    terms = string_expansion(len(b_list))
    values = [term.sign * _chain_integral(b_list, term.letters, alpha, components, False, t0, t, x) for term in terms]
    if not np.all(np.isfinite(values + [direct])):
        raise QuadratureError("Expansion quadrature produced non-finite values", {"terms": values, "direct": direct})
    check = ExpansionCheck(direct=direct, expanded=float(sum(values)), term_values=values, terms=terms)
    logger.info(f"String expansion n={len(b_list)}: direct {direct:.8g}, expanded {check.expanded:.8g}")
    return check


@dataclass(frozen=True)
class RateFit:
    slope: float
    se: float
    intercept: float


def gamma_rate_fit(
    gaps: Sequence[float], values: Sequence[float], noise: Optional[Sequence[float]] = None, floor: float = 1e-14
) -> RateFit:
    """Slope of log|J| against log(t - t0)."""
    gaps = np.asarray(gaps, dtype=float)
    magnitude = np.abs(np.asarray(values, dtype=float))
    if len(gaps) < 5:
        raise EstimationError("Rate fits need at least 5 points", {"points": len(gaps)})
    if np.log10(gaps.max() / gaps.min()) < 1.5:
        raise EstimationError("Rate fit grid must span 1.5 decades", {"span": float(np.log10(gaps.max() / gaps.min()))})
    threshold = np.full(len(gaps), floor) if noise is None else np.maximum(settings.SE_MULTIPLE * np.asarray(noise), floor)
    if np.any(magnitude <= threshold):
        raise EstimationError("Values at the noise floor", {"values": magnitude.tolist()})
    fit = stats.linregress(np.log(gaps), np.log(magnitude))
    return RateFit(slope=float(fit.slope), se=float(fit.stderr), intercept=float(fit.intercept))
