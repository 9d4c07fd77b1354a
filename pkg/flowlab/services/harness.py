"""
Experiment orchestration: named checks per study kind, artifacts and reports
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from flowlab.core.config import settings
from flowlab.core.exceptions import ConfigurationError, FlowlabError
from flowlab.core.rng import stream_id_for
from flowlab.schemas.config import ExperimentConfig, load_manifest
from flowlab.schemas.report import CheckRecord, RunReport, SuiteReport
from flowlab.services.fields import DriftField, make_standard_fields, mollify
from flowlab.services.flow import (
    EnsembleSpec,
    FlowField,
    Lattice,
    compose_check,
    cocycle_check,
    euler_displacements,
    flow_to_frame,
    holder_exponents,
    inverse_flow_check,
    log_log_slope,
    make_lattice,
    monotonicity_check,
    simulate_flow,
    simulate_multiplicative_1d,
)
from flowlab.services.kernel import (
    HeatKernel,
    allowed,
    gamma_rate_fit,
    iterated_integral,
    kernel_l1_derivative,
    string_expansion,
    string_expansion_numeric_check,
)
from flowlab.services.paths import (
    BrownianPath,
    local_time_grid,
    local_time_space_integral,
    sample_path,
    uniform_edges,
)
from flowlab.services.regularity import (
    WeightFunction,
    ap_diagnostic,
    constant_weight,
    convergence_ratios,
    derivative_moment,
    fd_jacobian,
    gaussian_weight,
    power_weight,
    variational_jacobian,
    weighted_sobolev_norm,
)
from flowlab.services.transport import (
    InitialDatum,
    constant_datum,
    du_fourth_moment,
    gaussian_datum,
    gaussian_probe,
    mollification_convergence,
    solve_transport,
    tanh_datum,
    transport_to_frame,
    weak_residual,
)
from flowlab.services.zeronoise import (
    ZeroNoiseStudy,
    contraction_and_group_check,
    crossing_check,
    local_time_derivative,
    ode_residual,
    oracle_error,
    run_zero_noise,
    seed_independence,
    summary,
    w12_norm_study,
)

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"
SUITE_REPORT_FILE = "suite_report.json"


def _num(value) -> Optional[float]:
    return None if value is None else float(value)


def _record(name: str, value, tolerance, passed: bool, se=None, message: Optional[str] = None) -> CheckRecord:
    return CheckRecord(
        name=name, value=_num(value), tolerance=_num(tolerance), passed=bool(passed), se=_num(se), message=message
    )


def _plain(value):
    """numpy scalars and arrays to JSON-ready Python values"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class StudyContext:
    """Shared state of one run: config, lazily built inputs and written artifacts"""

    config: ExperimentConfig
    out_dir: Path
    threads: Optional[int] = None
    artifacts: List[str] = field(default_factory=list)
    memo: Dict[str, Any] = field(default_factory=dict, repr=False)

    @cached_property
    def drift(self) -> DriftField:
        params = {"d": self.config.d, **self.config.drift.params}
        return make_standard_fields(self.config.drift.key, params)

    @cached_property
    def lattice(self) -> Lattice:
        spec = self.config.lattice
        return make_lattice(spec.lo, spec.hi, spec.count, self.config.d)

    @cached_property
    def path(self) -> BrownianPath:
        horizon = max(self.config.T, self.config.eval_time)
        return sample_path(self.config.seed, stream_id_for(self.config.name, 0), self.config.d, horizon, self.config.dt)

    @cached_property
    def spec(self) -> EnsembleSpec:
        return EnsembleSpec(seed=self.config.seed, size=self.config.M, dt=self.config.dt, study=self.config.name)

    @property
    def exact(self) -> bool:
        """Drifts for which Euler steps reduce to dyadic path arithmetic"""
        return self.drift.key == "zero"

    def tolerance(self, check: str, default: float) -> float:
        return self.config.tolerance(check, default)

    def cached(self, key: str, factory: Callable[[], Any]):
        if key not in self.memo:
            self.memo[key] = factory()
        return self.memo[key]

    def write_frame(self, name: str, frame: pd.DataFrame) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(self.out_dir / name, index=False)
        self.artifacts.append(name)

    def write_json(self, name: str, payload: Dict[str, Any]) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with (self.out_dir / name).open("w", encoding="utf-8") as f:
            json.dump(_plain(payload), f, indent=2)
        self.artifacts.append(name)


CheckFn = Callable[[StudyContext], CheckRecord]


@dataclass(frozen=True)
class StudyKind:
    """Checks a study kind knows, the default selection and its artifact writer"""

    checks: Dict[str, CheckFn]
    defaults: Callable[[StudyContext], List[str]]
    writer: Callable[[StudyContext], None]


# Flow


def _flow(ctx: StudyContext) -> FlowField:
    return ctx.cached(
        "flow", lambda: simulate_flow(ctx.drift, ctx.path, 0.0, ctx.config.T, 1, ctx.lattice, ctx.config.dt)
    )


def _on_grid(ctx: StudyContext, fraction: float) -> float:
    dt = ctx.config.dt
    return dt * round(fraction * ctx.config.T / dt)


def _flow_tolerance(ctx: StudyContext, check: str) -> float:
    return ctx.tolerance(check, 0.0 if ctx.exact else float(np.sqrt(ctx.config.dt)))


def _deviation_record(name: str, report, tolerance: float) -> CheckRecord:
    message = f"{report.evaluated} points evaluated, {report.excluded} outside the lattice hull"
    passed = report.evaluated > 0 and report.deviation <= tolerance
    return _record(name, report.deviation, tolerance, passed, message=message)


def flow_compose(ctx: StudyContext) -> CheckRecord:
    report = compose_check(_flow(ctx), 0.0, _on_grid(ctx, 0.5), ctx.config.T)
    return _deviation_record("compose", report, _flow_tolerance(ctx, "compose"))


def flow_inverse(ctx: StudyContext) -> CheckRecord:
    report = inverse_flow_check(ctx.drift, ctx.path, 0.0, ctx.config.T, ctx.lattice, ctx.config.dt)
    return _deviation_record("inverse", report, _flow_tolerance(ctx, "inverse"))


def flow_cocycle(ctx: StudyContext) -> CheckRecord:
    t1 = _on_grid(ctx, 0.5)
    report = cocycle_check(ctx.drift, ctx.path, t1, ctx.config.T - t1, ctx.lattice, ctx.config.dt)
    return _deviation_record("cocycle", report, _flow_tolerance(ctx, "cocycle"))


def flow_monotone(ctx: StudyContext) -> CheckRecord:
    report = monotonicity_check(_flow(ctx))
    return _record(
        "monotone", report.min_ratio, 0.0, report.strictly_increasing,
        message=f"gap ratios in [{report.min_ratio:.6g}, {report.max_ratio:.6g}]",
    )


def flow_jacobian_identity(ctx: StudyContext) -> CheckRecord:
    flowfield = _flow(ctx)
    identity = np.eye(ctx.config.d)
    deviation = max(
        float(np.max(np.abs(jac.matrices - identity)))
        for jac in (variational_jacobian(ctx.drift, flowfield), fd_jacobian(flowfield))
    )
    tolerance = ctx.tolerance("jacobian_identity", 0.0)
    return _record("jacobian_identity", deviation, tolerance, deviation <= tolerance)


def _ou_rate(ctx: StudyContext) -> Tuple[float, float]:
    if ctx.drift.key != "linear_ou":
        raise ConfigurationError("This check needs the linear_ou drift", {"drift": ctx.drift.key})
    return float(ctx.drift.params["rate"]), float(ctx.drift.params["clip"])


def flow_ou_recursion(ctx: StudyContext) -> CheckRecord:
    """Euler flow against the exponential recursion Y <- exp(-a dt) Y + dB on the same increments.

    While no trajectory reaches the clip the gap is at most
    K |1 - a dt - exp(-a dt)| max|Y|.
    """
    rate, clip = _ou_rate(ctx)
    flowfield = _flow(ctx)
    dt = ctx.config.dt
    decay = np.exp(-rate * dt)
    reference = np.empty_like(flowfield.states)
    reference[0] = flowfield.x_grid
    increments = ctx.path.increments
    for k in range(len(flowfield.times) - 1):
        reference[k + 1] = decay * reference[k] + increments[k]
    deviation = float(np.max(np.abs(flowfield.states[-1] - reference[-1])))
    steps = len(flowfield.times) - 1
    bound = steps * abs(1.0 - rate * dt - decay) * float(np.max(np.abs(reference))) * (1.0 + 1e-9) + 1e-12
    tolerance = ctx.tolerance("ou_recursion", bound)
    inside = bool(np.max(np.abs(flowfield.states)) < clip)
    message = None if inside else "trajectories reached the clip"
    return _record("ou_recursion", deviation, tolerance, inside and deviation <= tolerance, message=message)


def _nested_paths(ctx: StudyContext, refinements: Sequence[int] = (1, 2, 4)) -> List[BrownianPath]:
    """One path sampled at the finest step and read back at dt / r for each refinement r."""
    finest = max(refinements)
    fine = ctx.cached(
        f"path/{finest}",
        lambda: sample_path(
            ctx.config.seed, stream_id_for(ctx.config.name, 0), ctx.config.d, ctx.config.T, ctx.config.dt / finest
        ),
    )
    return [fine.coarsen(finest // r) for r in refinements]


def _halving_record(ctx: StudyContext, name: str, errors: Sequence[float]) -> CheckRecord:
    ratios = convergence_ratios(errors)
    tolerance = ctx.tolerance(name, 0.2)
    passed = bool(np.all(np.abs(ratios - 2.0) <= tolerance))
    return _record(
        name, float(ratios.min()), tolerance, passed,
        message=f"errors {[f'{e:.3e}' for e in errors]}, ratios {[round(float(r), 4) for r in ratios]}",
    )


def _recursion_gap(rate: float, flowfield: FlowField, path: BrownianPath) -> float:
    decay = np.exp(-rate * path.dt)
    reference = flowfield.x_grid.copy()
    for increment in path.increments:
        reference = decay * reference + increment
    return float(np.max(np.abs(flowfield.states[-1] - reference)))


def flow_halving(ctx: StudyContext) -> CheckRecord:
    """Euler flow against the exponential recursion at dt, dt/2, dt/4 on one nested path."""
    rate, _ = _ou_rate(ctx)
    T = ctx.config.T
    errors = [
        _recursion_gap(rate, simulate_flow(ctx.drift, path, 0.0, T, 1, ctx.lattice, path.dt), path)
        for path in _nested_paths(ctx)
    ]
    return _halving_record(ctx, "flow_halving", errors)


def flow_inverse_halving(ctx: StudyContext) -> CheckRecord:
    """Inverse-flow deviation at dt, dt/2, dt/4 on one nested path."""
    errors = [
        inverse_flow_check(ctx.drift, path, 0.0, ctx.config.T, ctx.lattice, path.dt).deviation
        for path in _nested_paths(ctx)
    ]
    return _halving_record(ctx, "inverse_halving", errors)


def flow_jacobian_halving(ctx: StudyContext) -> CheckRecord:
    """Variational Jacobian at T against exp(-a T) over dt, dt/2, dt/4."""
    rate, _ = _ou_rate(ctx)
    T = ctx.config.T
    exact = np.exp(-rate * T) * np.eye(ctx.config.d)
    errors = []
    for path in _nested_paths(ctx):
        flowfield = simulate_flow(ctx.drift, path, 0.0, T, 1, ctx.lattice, path.dt)
        jac = variational_jacobian(ctx.drift, flowfield).matrices[-1]
        errors.append(float(np.max(np.abs(jac - exact))))
    return _halving_record(ctx, "jacobian_halving", errors)


def flow_lamperti_direct(ctx: StudyContext) -> CheckRecord:
    """Lamperti route against direct Euler for constant sigma."""
    sigma = ctx.config.sigma
    if sigma is None or ctx.config.d != 1:
        raise ConfigurationError("lamperti_direct needs d = 1 and a constant sigma", {"sigma": sigma})
    x0 = ctx.lattice.points[:, 0]
    T = ctx.config.T
    reach = ctx.drift.sup_bound * T + sigma * (float(np.max(np.abs(ctx.path.values))) + 1.0)
    domain = (min(float(x0.min()) - reach, -1.0), max(float(x0.max()) + reach, 1.0))

    def constant_sigma(x):
        return np.full(np.shape(x), sigma)

    def zero_slope(x):
        return np.zeros(np.shape(x))

    lamperti = simulate_multiplicative_1d(ctx.drift, constant_sigma, ctx.path, x0, T, domain, "lamperti", zero_slope)
    direct = simulate_multiplicative_1d(ctx.drift, constant_sigma, ctx.path, x0, T, domain, "direct")
    deviation = float(np.max(np.abs(lamperti - direct)))
    tolerance = ctx.tolerance("lamperti_direct", ctx.config.dt)
    return _record("lamperti_direct", deviation, tolerance, deviation <= tolerance)


def _flow_defaults(ctx: StudyContext) -> List[str]:
    names = ["compose", "inverse"]
    if ctx.drift.autonomous:
        names.append("cocycle")
    if ctx.config.d == 1:
        names.append("monotone")
    if ctx.exact:
        names.append("jacobian_identity")
    if ctx.drift.key == "linear_ou":
        names += ["ou_recursion", "flow_halving", "inverse_halving", "jacobian_halving"]
    if ctx.config.sigma is not None and ctx.config.d == 1:
        names.append("lamperti_direct")
    return names


def _flow_writer(ctx: StudyContext) -> None:
    ctx.write_frame("flow.csv", flow_to_frame(_flow(ctx)))


# Holder exponents


def _holder(ctx: StudyContext):
    return ctx.cached(
        "holder",
        lambda: holder_exponents(
            ctx.drift, ctx.spec, ctx.config.q, ctx.config.time_gaps, ctx.config.space_gaps, threads=ctx.threads
        ),
    )


def holder_beta_time(ctx: StudyContext) -> CheckRecord:
    fit = _holder(ctx)
    target = ctx.config.q / 2.0
    tolerance = ctx.tolerance("beta_time", 0.1) * target
    return _record("beta_time", fit.beta_time, tolerance, abs(fit.beta_time - target) <= tolerance, se=fit.se_time,
                   message=f"target {target}")


def holder_beta_space(ctx: StudyContext) -> CheckRecord:
    fit = _holder(ctx)
    target = float(ctx.config.q)
    tolerance = ctx.tolerance("beta_space", 0.1) * target
    return _record("beta_space", fit.beta_space, tolerance, abs(fit.beta_space - target) <= tolerance, se=fit.se_space,
                   message=f"target {target}")


def _holder_writer(ctx: StudyContext) -> None:
    if "holder" not in ctx.memo:
        return
    fit = ctx.memo["holder"]
    frame = pd.concat([
        pd.DataFrame({"probe": "time", "gap": fit.time_gaps, "moment": fit.time_moments}),
        pd.DataFrame({"probe": "space", "gap": fit.space_gaps, "moment": fit.space_moments}),
    ], ignore_index=True)
    ctx.write_frame("holder.csv", frame)


# Regularity


def _family(ctx: StudyContext) -> List[DriftField]:
    return ctx.cached("family", lambda: [mollify(ctx.drift, n) for n in ctx.config.levels])


def _moments(ctx: StudyContext, weighted: bool = False):
    key = "moments_weighted" if weighted else "moments"
    return ctx.cached(
        key,
        lambda: derivative_moment(
            _family(ctx), ctx.config.p, ctx.config.eval_time, ctx.config.probes, ctx.spec,
            levels=ctx.config.levels, weighted=weighted, threads=ctx.threads,
        ),
    )


def _weight(ctx: StudyContext) -> WeightFunction:
    spec = ctx.config.weight
    if spec.family == "constant":
        return constant_weight(ctx.config.d, spec.p)
    if spec.family == "power":
        return power_weight(ctx.config.d, spec.p, spec.gamma)
    return gaussian_weight(ctx.config.d, spec.p, spec.scale)


def regularity_derivative_uniformity(ctx: StudyContext) -> CheckRecord:
    study = _moments(ctx)
    band = ctx.tolerance("derivative_uniformity", settings.UNIFORMITY_BAND)
    slope, slope_se = study.trend()
    trending = study.positive_trend()
    return _record(
        "derivative_uniformity", study.ratio, band, study.ratio <= band and not trending,
        se=float(study.standard_errors.max()),
        message=f"estimates {[round(float(v), 6) for v in study.estimates]}, trend {slope:.4g} +- {slope_se:.2g}",
    )


def regularity_lipschitz_growth(ctx: StudyContext) -> CheckRecord:
    study = _moments(ctx)
    slope, se = log_log_slope(np.asarray(study.levels, dtype=float), study.lipschitz)
    tolerance = ctx.tolerance("lipschitz_growth", 0.2)
    return _record("lipschitz_growth", slope, tolerance, abs(slope - 1.0) <= tolerance, se=se,
                   message="log-log slope of sup|b_n'| against n")


def regularity_girsanov_agreement(ctx: StudyContext) -> CheckRecord:
    study = _moments(ctx, weighted=True)
    combined = np.sqrt(study.standard_errors**2 + study.weighted_standard_errors**2)
    scores = np.abs(study.estimates - study.weighted_estimates) / combined
    multiple = ctx.tolerance("girsanov_agreement", settings.SE_MULTIPLE)
    return _record("girsanov_agreement", float(scores.max()), multiple, bool(np.all(scores <= multiple)),
                   message="largest gap between direct and reweighted moments in combined SEs")


def regularity_sobolev_norm(ctx: StudyContext) -> CheckRecord:
    """Weighted W^{1,p} norm of the coarsest smooth member with variational and finite-difference Jacobians."""
    member = _family(ctx)[0]
    t = ctx.config.eval_time
    flowfield = simulate_flow(member, ctx.path, 0.0, t, 1, ctx.lattice, ctx.config.dt)
    w = _weight(ctx)
    variational = weighted_sobolev_norm(flowfield, variational_jacobian(member, flowfield), w)
    differenced = weighted_sobolev_norm(flowfield, fd_jacobian(flowfield), w)
    gap = abs(variational.value - differenced.value) / variational.value
    tolerance = ctx.tolerance("sobolev_norm", 0.1)
    ctx.memo["sobolev"] = (variational, differenced)
    return _record(
        "sobolev_norm", variational.value, tolerance, np.isfinite(variational.value) and gap <= tolerance,
        message=f"finite-difference norm {differenced.value:.6g}, relative gap {gap:.3e}, tail bound {variational.tail_bound:.3e}",
    )


def regularity_ap_verdict(ctx: StudyContext) -> CheckRecord:
    spec = ctx.config.weight
    d = ctx.config.d
    off_center = [((1.0,) * d, 0.5), ((2.0,) * d, 3.0)]
    diagnostic = ap_diagnostic(spec.gamma, spec.p, d, ctx.config.radii, off_center=off_center)
    expected = "finite" if -d < spec.gamma < d * (spec.p - 1.0) else "diverging"
    ctx.memo["ap"] = diagnostic
    return _record("ap_verdict", diagnostic.supremum, None, diagnostic.verdict == expected,
                   message=f"verdict {diagnostic.verdict}, expected {expected}")


def _regularity_defaults(ctx: StudyContext) -> List[str]:
    names = ["derivative_uniformity"]
    if not ctx.drift.smooth:
        names.append("lipschitz_growth")
    return names + ["sobolev_norm", "ap_verdict"]


def _regularity_writer(ctx: StudyContext) -> None:
    for key in ("moments", "moments_weighted"):
        if key not in ctx.memo:
            continue
        study = ctx.memo[key]
        frame = pd.DataFrame({
            "level": study.levels, "estimate": study.estimates, "se": study.standard_errors,
            "lipschitz": study.lipschitz,
        })
        if study.weighted_estimates is not None:
            frame["weighted_estimate"] = study.weighted_estimates
            frame["weighted_se"] = study.weighted_standard_errors
        ctx.write_frame("derivative_moments.csv" if key == "moments" else "derivative_moments_weighted.csv", frame)
    if "ap" in ctx.memo:
        diagnostic = ctx.memo["ap"]
        ctx.write_frame("ap.csv", pd.DataFrame({"radius": diagnostic.radii, "product": diagnostic.products}))
    if "sobolev" in ctx.memo:
        variational, differenced = ctx.memo["sobolev"]
        ctx.write_json("sobolev.json", {
            "p": variational.p,
            "variational": {"value": variational.value, "lp": variational.lp_part, "tail": variational.tail_bound},
            "finite_difference": {"value": differenced.value, "lp": differenced.lp_part},
        })


# Kernel


def _sine() -> DriftField:
    return make_standard_fields("sine", {"d": 1})


def _kernel_records(ctx: StudyContext) -> List[Dict[str, Any]]:
    return ctx.memo.setdefault("records", [])


def _rate_gaps(ctx: StudyContext) -> np.ndarray:
    return ctx.config.eval_time * np.geomspace(1e-2, 1.0, 6)


def kernel_sin_oracle(ctx: StudyContext) -> CheckRecord:
    t = ctx.config.eval_time
    result = iterated_integral([_sine()], [0], 0.0, t)
    _kernel_records(ctx).append(result.to_record())
    exact = 2.0 * (1.0 - np.exp(-t / 2.0))
    error = abs(result.estimate - exact)
    tolerance = ctx.tolerance("sin_oracle", 1e-6)
    return _record("sin_oracle", error, tolerance, error <= tolerance,
                   message=f"estimate {result.estimate:.10f}, exact {exact:.10f}")


def kernel_monte_carlo(ctx: StudyContext) -> CheckRecord:
    t = ctx.config.eval_time
    result = iterated_integral(
        [_sine()], [0], 0.0, t, method="monte_carlo", budget=ctx.config.budget, seed=ctx.config.seed,
        threads=ctx.threads,
    )
    _kernel_records(ctx).append(result.to_record())
    exact = 2.0 * (1.0 - np.exp(-t / 2.0))
    multiple = ctx.tolerance("monte_carlo", settings.SE_MULTIPLE)
    return _record("monte_carlo", result.estimate - exact, multiple * result.se,
                   abs(result.estimate - exact) <= multiple * result.se, se=result.se)


def kernel_string_counts(ctx: StudyContext) -> CheckRecord:
    mismatches = 0
    details = []
    for n in (1, 2, 3):
        terms = string_expansion(n)
        mismatches += int(len(terms) != 2 ** (n - 1)) + sum(not allowed(term) for term in terms)
        details.append(f"n={n}: " + " ".join(term.render() for term in terms))
    return _record("string_counts", mismatches, 0.0, mismatches == 0, message="; ".join(details))


def kernel_expansion_identity(ctx: StudyContext) -> CheckRecord:
    drift = ctx.drift if ctx.drift.smooth and ctx.drift.d == 1 and ctx.drift.sup_bound > 0 else _sine()
    t = ctx.config.eval_time
    checks = [string_expansion_numeric_check([drift] * n, [0] * n, 0.0, t, x=ctx.config.x0) for n in (1, 2)]
    worst = max(check.discrepancy for check in checks)
    tolerance = ctx.tolerance("expansion_identity", 1e-4)
    return _record(
        "expansion_identity", worst, tolerance, worst <= tolerance,
        message=f"{drift.key}: " + ", ".join(f"direct {c.direct:.8g} vs expanded {c.expanded:.8g}" for c in checks),
    )


def _flatness(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    return float((values.max() - values.min()) / values.mean())


def kernel_l1_scaling_order1(ctx: StudyContext) -> CheckRecord:
    times = np.geomspace(1e-3, 10.0, 9)
    spread = _flatness([kernel_l1_derivative(s, 1) * np.sqrt(s) for s in times])
    tolerance = ctx.tolerance("l1_scaling_order1", 1e-8)
    return _record("l1_scaling_order1", spread, tolerance, spread <= tolerance)


def kernel_l1_scaling_order2(ctx: StudyContext) -> CheckRecord:
    times = np.geomspace(1e-3, 10.0, 9)
    spread = max(
        _flatness([kernel_l1_derivative(s, 2, indices) * s for s in times]) for indices in ((0, 0), (0, 1))
    )
    tolerance = ctx.tolerance("l1_scaling_order2", 1e-5)
    return _record("l1_scaling_order2", spread, tolerance, spread <= tolerance)


def kernel_heat_mass(ctx: StudyContext) -> CheckRecord:
    kernel = HeatKernel(ctx.config.d)
    error = max(abs(kernel.mass(s) - 1.0) for s in np.geomspace(1e-3, 10.0, 5))
    tolerance = ctx.tolerance("heat_mass", 1e-8)
    return _record("heat_mass", error, tolerance, error <= tolerance)


def _gamma_rate(ctx: StudyContext, n: int) -> CheckRecord:
    name = f"gamma_rate_n{n}"
    gaps = _rate_gaps(ctx)
    results = [iterated_integral([_sine()] * n, [0] * n, 0.0, float(g)) for g in gaps]
    _kernel_records(ctx).extend(r.to_record() for r in results)
    fit = gamma_rate_fit(gaps, [r.estimate for r in results])
    threshold = n / 2.0 - ctx.tolerance(name, 0.1)
    return _record(name, fit.slope, threshold, fit.slope >= threshold, se=fit.se,
                   message=f"slope of log|J_{n}| against log(t - t0), must reach n/2 - slack")


def kernel_gamma_rate_n1(ctx: StudyContext) -> CheckRecord:
    return _gamma_rate(ctx, 1)


def kernel_gamma_rate_n2(ctx: StudyContext) -> CheckRecord:
    return _gamma_rate(ctx, 2)


def kernel_bound_holds(ctx: StudyContext) -> CheckRecord:
    records = _kernel_records(ctx)
    if not records:
        result = iterated_integral([_sine()], [0], 0.0, ctx.config.eval_time)
        records.append(result.to_record())
    worst = max(abs(r["estimate"]) / r["bound"] for r in records)
    return _record("bound_holds", worst, 1.0, worst <= 1.0, message=f"largest |J| / bound over {len(records)} integrals")


def _kernel_defaults(ctx: StudyContext) -> List[str]:
    return [
        "sin_oracle", "string_counts", "expansion_identity", "l1_scaling_order1", "l1_scaling_order2",
        "heat_mass", "gamma_rate_n1", "gamma_rate_n2", "bound_holds",
    ]


def _kernel_writer(ctx: StudyContext) -> None:
    ctx.write_json("kernel.json", {
        "records": _kernel_records(ctx),
        "strings": {str(n): [term.render() for term in string_expansion(n)] for n in (1, 2, 3)},
    })


# Transport


def _datum(ctx: StudyContext) -> InitialDatum:
    builders = {"tanh": tanh_datum, "gaussian": gaussian_datum, "constant": constant_datum}
    return builders[ctx.config.datum]()


def _transport(ctx: StudyContext):
    return ctx.cached(
        "transport",
        lambda: solve_transport(_datum(ctx), ctx.drift, ctx.path, ctx.config.eval_time, ctx.lattice, ctx.config.dt),
    )


def _probe(ctx: StudyContext):
    return gaussian_probe(np.zeros(ctx.config.d), ctx.config.probe_width)


def transport_translation_exact(ctx: StudyContext) -> CheckRecord:
    field_t = _transport(ctx)
    shifted = ctx.lattice.points - ctx.path.value_at(ctx.config.eval_time)
    deviation = float(np.max(np.abs(field_t.values - _datum(ctx)(shifted))))
    tolerance = ctx.tolerance("translation_exact", 0.0)
    return _record("translation_exact", deviation, tolerance, deviation <= tolerance)


def transport_max_principle(ctx: StudyContext) -> CheckRecord:
    excess = _transport(ctx).sup - _datum(ctx).sup_norm
    return _record("max_principle", excess, 0.0, excess <= 0.0, message="sup|u(t)| - sup|u0|")


def transport_t0_identity(ctx: StudyContext) -> CheckRecord:
    u0 = _datum(ctx)
    start = solve_transport(u0, ctx.drift, ctx.path, 0.0, ctx.lattice, ctx.config.dt)
    deviation = float(np.max(np.abs(start.values - u0(ctx.lattice.points))))
    return _record("t0_identity", deviation, 0.0, deviation == 0.0)


def transport_weak_residual(ctx: StudyContext) -> CheckRecord:
    study = weak_residual(_datum(ctx), ctx.drift, _probe(ctx), ctx.config.eval_time, ctx.spec, ctx.lattice, ctx.threads)
    ctx.memo["residual"] = study
    multiple = ctx.tolerance("weak_residual", settings.SE_MULTIPLE)
    return _record("weak_residual", study.mean, multiple * study.se, abs(study.mean) <= multiple * study.se,
                   se=study.se, message=f"mean |R| {study.abs_mean:.4e}")


def transport_mollification_monotone(ctx: StudyContext) -> CheckRecord:
    study = mollification_convergence(
        _datum(ctx), ctx.drift, ctx.config.levels, _probe(ctx).fn, ctx.config.eval_time, ctx.spec, ctx.lattice,
        threads=ctx.threads,
    )
    ctx.memo["mollification"] = study
    return _record(
        "mollification_monotone", float(study.distances[-1]), None, study.nonincreasing(),
        se=float(study.standard_errors[-1]),
        message=f"distances {[f'{v:.4e}' for v in study.distances]}",
    )


def transport_du_fourth_moment(ctx: StudyContext) -> CheckRecord:
    value, se = du_fourth_moment(_datum(ctx), ctx.drift, ctx.config.eval_time, ctx.spec, ctx.lattice, ctx.threads)
    return _record("du_fourth_moment", value, None, np.isfinite(value), se=se, message="sup_x E|Du|^4 on the lattice")


def _transport_defaults(ctx: StudyContext) -> List[str]:
    names = ["translation_exact"] if ctx.exact else []
    names += ["max_principle", "t0_identity", "weak_residual"]
    if not ctx.drift.smooth:
        names.append("mollification_monotone")
    return names + ["du_fourth_moment"]


def _transport_writer(ctx: StudyContext) -> None:
    ctx.write_frame("transport.csv", transport_to_frame(_transport(ctx)))
    payload: Dict[str, Any] = {}
    if "residual" in ctx.memo:
        payload["residual"] = ctx.memo["residual"].to_record()
    if "mollification" in ctx.memo:
        study = ctx.memo["mollification"]
        payload["mollification"] = {
            "levels": study.levels, "distances": study.distances, "standard_errors": study.standard_errors,
        }
    if payload:
        ctx.write_json("transport.json", payload)


# Zero noise


def _zero_noise(ctx: StudyContext) -> ZeroNoiseStudy:
    return ctx.cached(
        "zero_noise",
        lambda: run_zero_noise(
            ctx.drift, ctx.lattice, ctx.config.T, ctx.config.dt, ctx.config.levels, seed=ctx.config.seed,
            threads=ctx.threads,
        ),
    )


def _interval(ctx: StudyContext) -> Tuple[float, float]:
    if ctx.config.interval is not None:
        return tuple(ctx.config.interval)
    lo, hi = ctx.config.lattice.lo, ctx.config.lattice.hi
    quarter = 0.25 * (hi - lo)
    return lo + quarter, hi - quarter


def zeronoise_ode_residual(ctx: StudyContext) -> CheckRecord:
    study = _zero_noise(ctx)
    finest = study.levels[-1]
    residual = ode_residual(study.limit, ctx.drift, ctx.config.dt)
    default = (
        2.0 * ctx.drift.sup_bound * (ctx.config.dt + 1.0 / finest)
        + study.extrapolation_gap
        + float(np.max(np.abs(study.path.values))) / finest
    )
    tolerance = ctx.tolerance("ode_residual", default)
    return _record("ode_residual", residual, tolerance, residual <= tolerance, message=f"limit by {study.method}")


def zeronoise_oracle_error(ctx: StudyContext) -> CheckRecord:
    """Limit against a fine deterministic solve, with the constant C measured again at (dt/2, 2n)."""
    study = _zero_noise(ctx)
    scale = ctx.config.dt + 1.0 / study.levels[-1]
    error = oracle_error(study)
    halved = run_zero_noise(
        ctx.drift, ctx.lattice, ctx.config.T, ctx.config.dt / 2.0, [2 * n for n in study.levels],
        seed=ctx.config.seed, threads=ctx.threads,
    )
    halved_error = oracle_error(halved)
    constant = ctx.tolerance("oracle_error", 5.0)
    passed = error <= constant * scale and halved_error <= constant * scale / 2.0
    return _record(
        "oracle_error", error, constant * scale, passed,
        message=f"C = {error / scale:.4g} at (dt, n), {halved_error / (scale / 2.0):.4g} after halving",
    )


def _contraction(ctx: StudyContext):
    return ctx.cached("contraction", lambda: contraction_and_group_check(_zero_noise(ctx)))


def zeronoise_contraction(ctx: StudyContext) -> CheckRecord:
    report = _contraction(ctx)
    tolerance = 1.0 + ctx.tolerance("contraction", 5.0) * ctx.config.dt
    return _record("contraction", report.expansion_ratio, tolerance, report.expansion_ratio <= tolerance)


def zeronoise_group_deviation(ctx: StudyContext) -> CheckRecord:
    report = _contraction(ctx)
    default = max(ctx.lattice.spacing) + 10.0 * ctx.config.dt
    tolerance = ctx.tolerance("group_deviation", default)
    return _record(
        "group_deviation", report.group_deviation, tolerance, report.group_deviation <= tolerance,
        message=f"{report.evaluated} points evaluated, {report.excluded} outside the lattice hull",
    )


def zeronoise_group_refinement(ctx: StudyContext) -> CheckRecord:
    """Group deviation at (dt, h, n), (dt/2, h/2, 2n), (dt/4, h/4, 4n); it must keep shrinking."""
    spec = ctx.config.lattice
    deviations = [_contraction(ctx).group_deviation]
    for r in (2, 4):
        lattice = make_lattice(spec.lo, spec.hi, (spec.count - 1) * r + 1, ctx.config.d)
        study = run_zero_noise(
            ctx.drift, lattice, ctx.config.T, ctx.config.dt / r, [r * n for n in ctx.config.levels],
            seed=ctx.config.seed, threads=ctx.threads,
        )
        deviations.append(contraction_and_group_check(study).group_deviation)
    first, last = deviations[0], deviations[-1]
    share = ctx.tolerance("group_refinement", 0.5)
    if first <= 1e-12:
        value, passed = 0.0, last <= 1e-12
    else:
        value = last / first
        passed = bool(np.all(np.diff(deviations) <= 0.0)) and value <= share
    return _record(
        "group_refinement", value, share, passed,
        message=f"deviations {[f'{v:.3e}' for v in deviations]}",
    )


def zeronoise_monotone_limit(ctx: StudyContext) -> CheckRecord:
    study = _zero_noise(ctx)
    smallest = float(np.min(np.diff(study.limit[..., 0], axis=1)))
    return _record("monotone_limit", smallest, 0.0, smallest >= 0.0, message="smallest gap between neighbours")


def _local_time(ctx: StudyContext):
    study = _zero_noise(ctx)
    return ctx.cached(
        "local_time",
        lambda: local_time_derivative(ctx.drift, study.levels[-1], study.path, ctx.config.x0, t=ctx.config.T),
    )


def zeronoise_local_time_vs_fd(ctx: StudyContext) -> CheckRecord:
    result = _local_time(ctx)
    error = abs(result.representation - result.finite_difference) / abs(result.finite_difference)
    tolerance = ctx.tolerance("local_time_vs_fd", 0.10)
    return _record(
        "local_time_vs_fd", error, tolerance, error <= tolerance,
        message=f"local time {result.representation:.5f}, finite difference {result.finite_difference:.5f}",
    )


def zeronoise_local_time_vs_variational(ctx: StudyContext) -> CheckRecord:
    result = _local_time(ctx)
    if result.variational is None:
        raise ConfigurationError("local_time_vs_variational needs a smooth drift", {"drift": ctx.drift.key})
    error = abs(result.representation - result.variational) / abs(result.variational)
    tolerance = ctx.tolerance("local_time_vs_variational", 0.05)
    return _record(
        "local_time_vs_variational", error, tolerance, error <= tolerance,
        message=f"local time {result.representation:.5f}, variational {result.variational:.5f}",
    )


def zeronoise_local_time_identity(ctx: StudyContext) -> CheckRecord:
    study = _zero_noise(ctx)
    n = study.levels[-1]
    result = local_time_derivative(ctx.drift, n, study.path, ctx.config.x0, t=ctx.config.T, with_identity=True)
    error = result.identity.relative_error
    tolerance = ctx.tolerance("local_time_identity", 0.05)
    return _record("local_time_identity", error, tolerance, error <= tolerance,
                   message=f"lhs {result.identity.lhs:.6g}, rhs {result.identity.rhs:.6g}")


def zeronoise_occupation_mass(ctx: StudyContext) -> CheckRecord:
    """int f dL against the time integral of f along the perturbed trajectory, f(y) = exp(-y^2)."""
    study = _zero_noise(ctx)
    n = study.levels[-1]
    delta = 1.0 / n
    steps = len(study.times) - 1
    start = np.array([[ctx.config.x0]])
    disp = euler_displacements(ctx.drift, start, study.path.values[:, None, :] * delta, 0, steps, 1, ctx.config.dt)
    trajectory = (start[None] + disp)[:, 0, 0]
    width = delta / 10.0
    edges = uniform_edges(trajectory.min() - 2 * width, trajectory.max() + 2 * width, width)
    ltg = local_time_grid(trajectory, edges, dt=ctx.config.dt, diffusion=delta**2)
    occupation = local_time_space_integral(ltg, lambda s, y: np.exp(-(y**2)))
    riemann = float(np.sum(np.exp(-trajectory[:-1] ** 2)) * ctx.config.dt)
    error = abs(occupation - riemann) / riemann
    tolerance = ctx.tolerance("occupation_mass", 0.02)
    return _record("occupation_mass", error, tolerance, error <= tolerance,
                   message=f"occupation {occupation:.6g}, time integral {riemann:.6g}")


def zeronoise_w12_uniform(ctx: StudyContext) -> CheckRecord:
    study = w12_norm_study(_zero_noise(ctx), _interval(ctx))
    band = ctx.tolerance("w12_uniform", settings.UNIFORMITY_BAND)
    levels = study.totals[:-1]
    ratio = float(levels.max() / levels.min())
    ctx.memo["w12"] = study
    return _record("w12_uniform", ratio, band, study.uniform(band),
                   message=", ".join(f"{label} {total:.5g}" for label, total in zip(study.labels, study.totals)))


def zeronoise_crossing(ctx: StudyContext) -> CheckRecord:
    report = crossing_check(_zero_noise(ctx))
    return _record("crossing", report.max_crossings, 1.0, report.max_crossings <= 1,
                   message=f"speed margin {report.speed_margin:.4g} at thresholds {report.thresholds}")


def zeronoise_seed_independence(ctx: StudyContext) -> CheckRecord:
    result = seed_independence(
        ctx.drift, ctx.lattice, ctx.config.T, ctx.config.dt, ctx.config.levels, seed=ctx.config.seed,
        threads=ctx.threads,
    )
    return _record("seed_independence", result.difference, result.tolerance, result.passed)


def _zeronoise_defaults(ctx: StudyContext) -> List[str]:
    names = ["ode_residual", "oracle_error", "contraction", "group_deviation", "group_refinement"]
    if ctx.config.d == 1:
        names += ["monotone_limit", "local_time_vs_fd"]
        if ctx.drift.smooth:
            names.append("local_time_vs_variational")
        names += ["occupation_mass", "w12_uniform"]
    return names + ["crossing", "seed_independence"]


def _zero_noise_frame(study: ZeroNoiseStudy) -> pd.DataFrame:
    steps, count, d = study.limit.shape
    frame: Dict[str, np.ndarray] = {
        "time": np.repeat(study.times, count),
        "x_index": np.tile(np.arange(count), steps),
    }
    for i in range(d):
        frame[f"x{i}"] = np.tile(study.x_grid[:, i], steps)
    for n, trajectories in zip(study.levels, study.trajectories):
        for i in range(d):
            frame[f"n{n}_{i}"] = trajectories[..., i].ravel()
    for i in range(d):
        frame[f"limit_{i}"] = study.limit[..., i].ravel()
    return pd.DataFrame(frame)


def _zeronoise_writer(ctx: StudyContext) -> None:
    study = _zero_noise(ctx)
    ctx.write_frame("zeronoise.csv", _zero_noise_frame(study))
    ctx.write_json("zeronoise.json", summary(study, _interval(ctx) if ctx.config.d == 1 else None))


STUDIES: Dict[str, StudyKind] = {
    "flow": StudyKind(
        checks={
            "compose": flow_compose, "inverse": flow_inverse, "cocycle": flow_cocycle, "monotone": flow_monotone,
            "jacobian_identity": flow_jacobian_identity, "ou_recursion": flow_ou_recursion,
            "flow_halving": flow_halving, "inverse_halving": flow_inverse_halving,
            "jacobian_halving": flow_jacobian_halving, "lamperti_direct": flow_lamperti_direct,
        },
        defaults=_flow_defaults, writer=_flow_writer,
    ),
    "holder": StudyKind(
        checks={"beta_time": holder_beta_time, "beta_space": holder_beta_space},
        defaults=lambda ctx: ["beta_time", "beta_space"], writer=_holder_writer,
    ),
    "regularity": StudyKind(
        checks={
            "derivative_uniformity": regularity_derivative_uniformity,
            "lipschitz_growth": regularity_lipschitz_growth,
            "girsanov_agreement": regularity_girsanov_agreement,
            "sobolev_norm": regularity_sobolev_norm,
            "ap_verdict": regularity_ap_verdict,
        },
        defaults=_regularity_defaults, writer=_regularity_writer,
    ),
    "kernel": StudyKind(
        checks={
            "sin_oracle": kernel_sin_oracle, "monte_carlo": kernel_monte_carlo, "string_counts": kernel_string_counts,
            "expansion_identity": kernel_expansion_identity, "l1_scaling_order1": kernel_l1_scaling_order1,
            "l1_scaling_order2": kernel_l1_scaling_order2, "heat_mass": kernel_heat_mass,
            "gamma_rate_n1": kernel_gamma_rate_n1, "gamma_rate_n2": kernel_gamma_rate_n2,
            "bound_holds": kernel_bound_holds,
        },
        defaults=_kernel_defaults, writer=_kernel_writer,
    ),
    "transport": StudyKind(
        checks={
            "translation_exact": transport_translation_exact, "max_principle": transport_max_principle,
            "t0_identity": transport_t0_identity, "weak_residual": transport_weak_residual,
            "mollification_monotone": transport_mollification_monotone,
            "du_fourth_moment": transport_du_fourth_moment,
        },
        defaults=_transport_defaults, writer=_transport_writer,
    ),
    "zeronoise": StudyKind(
        checks={
            "ode_residual": zeronoise_ode_residual, "oracle_error": zeronoise_oracle_error,
            "contraction": zeronoise_contraction, "group_deviation": zeronoise_group_deviation,
            "group_refinement": zeronoise_group_refinement,
            "monotone_limit": zeronoise_monotone_limit, "local_time_vs_fd": zeronoise_local_time_vs_fd,
            "local_time_vs_variational": zeronoise_local_time_vs_variational,
            "local_time_identity": zeronoise_local_time_identity, "occupation_mass": zeronoise_occupation_mass,
            "w12_uniform": zeronoise_w12_uniform, "crossing": zeronoise_crossing,
            "seed_independence": zeronoise_seed_independence,
        },
        defaults=_zeronoise_defaults, writer=_zeronoise_writer,
    ),
}


def known_checks(kind: str) -> List[str]:
    return list(STUDIES[kind].checks)


def _selected_checks(ctx: StudyContext) -> List[str]:
    study = STUDIES[ctx.config.kind]
    if not ctx.config.checks:
        return study.defaults(ctx)
    names = list(dict.fromkeys(ctx.config.checks))
    unknown = [name for name in names if name not in study.checks]
    if unknown:
        raise ConfigurationError(
            f"Unknown checks for kind '{ctx.config.kind}': {unknown}", {"known": known_checks(ctx.config.kind)}
        )
    return names


class ExperimentService:
    """Runs experiment configs and writes their reports"""

    def run(self, config: ExperimentConfig, threads: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> RunReport:
        """Execute every selected check of one config, write artifacts and report.json."""
        started = time.perf_counter()
        out_dir = Path(out if out is not None else config.output_dir) / config.name
        ctx = StudyContext(config=config, out_dir=out_dir, threads=threads)
        logger.info(f"Running '{config.name}' ({config.kind}, drift {config.drift.key})")
        try:
            names = _selected_checks(ctx)
            checks = STUDIES[config.kind].checks
            records = []
            for name in names:
                record = checks[name](ctx)
                logger.info(
                    f"[{config.name}] {name}: value={record.value} tolerance={record.tolerance} "
                    f"{'pass' if record.passed else 'FAIL'}"
                )
                records.append(record)
            STUDIES[config.kind].writer(ctx)
        except FlowlabError as e:
            logger.error(f"Run '{config.name}' failed: {e}")
            raise

        elapsed = time.perf_counter() - started
        ctx.write_json(TIMING_FILE, {"wall_clock": elapsed})
        report = RunReport(config=config, checks=records, artifacts=ctx.artifacts, wall_clock=elapsed)
        with (out_dir / REPORT_FILE).open("w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
        logger.info(f"Finished '{config.name}' in {elapsed:.2f}s: {'pass' if report.passed else 'FAIL'}")
        return report

    def _guarded_run(self, config: ExperimentConfig, threads: Optional[int], out: Optional[Union[str, Path]]) -> RunReport:
        try:
            return self.run(config, threads=threads, out=out)
        except FlowlabError as e:
            names = list(dict.fromkeys(config.checks)) or ["run"]
            records = [_record(name, None, None, False, message=str(e)) for name in names]
            return RunReport(config=config, checks=records)

    def suite(
        self,
        configs: Union[str, Path, Sequence[ExperimentConfig]],
        threads: Optional[int] = None,
        out: Optional[Union[str, Path]] = None,
    ) -> SuiteReport:
        """Run a manifest (path or config list) in parallel across configs, merged in manifest order."""
        if isinstance(configs, (str, Path)):
            configs = load_manifest(configs)
        configs = list(configs)
        if not configs:
            raise ConfigurationError("Suite needs at least one config")
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise ConfigurationError("Config names in a suite must be unique", {"names": names})

        with ThreadPoolExecutor(max_workers=threads or settings.THREADS) as pool:
            runs = list(pool.map(lambda c: self._guarded_run(c, threads, out), configs))
        report = SuiteReport(runs=runs, passed=all(run.passed for run in runs))
        out_dir = Path(out if out is not None else settings.OUTPUT_DIR)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / SUITE_REPORT_FILE).open("w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
        failed = [run.config.name for run in runs if not run.passed]
        logger.info(f"Suite of {len(runs)} configs: {'pass' if report.passed else 'FAIL ' + str(failed)}")
        return report


experiment_service = ExperimentService()


def run(config: ExperimentConfig, threads: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> RunReport:
    return experiment_service.run(config, threads=threads, out=out)


def suite(
    configs: Union[str, Path, Sequence[ExperimentConfig]],
    threads: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> SuiteReport:
    return experiment_service.suite(configs, threads=threads, out=out)
