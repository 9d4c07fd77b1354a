#!/usr/bin/env python3
"""
Tests for flow Jacobians, derivative moments, weighted Sobolev norms and A_p diagnostics
"""

import numpy as np
import pytest

from flowlab.core.exceptions import EstimationError, GridError, HypothesisError, QuadratureError
from flowlab.services.fields import make_standard_fields, mollify
from flowlab.services.flow import EnsembleSpec, make_lattice, simulate_flow
from flowlab.services.regularity import (
    DerivativeMomentStudy,
    ap_diagnostic,
    choose_radius,
    convergence_ratios,
    derivative_moment,
    fd_jacobian,
    gaussian_weight,
    moment_certificate,
    power_weight,
    variational_jacobian,
    weighted_sobolev_norm,
)


def test_zero_drift_jacobians_are_identity(zero_drift, unit_path, small_lattice):
    """Test that both Jacobian routes give I for b = 0"""
    flow = simulate_flow(zero_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01)
    identity = np.broadcast_to(np.eye(1), flow.displacement.shape[:2] + (1, 1))
    assert np.array_equal(variational_jacobian(zero_drift, flow).matrices, identity)
    assert np.array_equal(fd_jacobian(flow).matrices, identity)


def test_ou_jacobian_closed_form(ou_drift, unit_path, small_lattice):
    """Test J = (1 - a dt)^K for the linear drift by both routes"""
    flow = simulate_flow(ou_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01)
    expected = (1.0 - 0.01) ** 100
    variational = variational_jacobian(ou_drift, flow).at(100)
    finite = fd_jacobian(flow).at(100)
    assert np.allclose(variational, expected, rtol=1e-12)
    assert np.allclose(finite, expected, rtol=1e-9)


def test_variational_needs_smooth_drift(step_drift, unit_path, small_lattice):
    """Test that a step drift has no variational Jacobian"""
    flow = simulate_flow(step_drift, unit_path, 0.0, 0.5, 1, small_lattice, 0.01)
    with pytest.raises(HypothesisError):
        variational_jacobian(step_drift, flow)


def test_convergence_ratios():
    """Test err(h) / err(h/2)"""
    assert convergence_ratios([4.0, 2.0, 1.0]).tolist() == [2.0, 2.0]


def test_derivative_moment_monotone_family(step_drift, seed):
    """Test that a decreasing drift keeps E|J|^2 at most one across levels"""
    family = [mollify(step_drift, n) for n in (4, 16)]
    spec = EnsembleSpec(seed=seed, size=200, dt=0.01, study="moments")
    study = derivative_moment(family, 2.0, 0.5, [[-0.2], [0.0]], spec)
    assert study.levels == [4, 16]
    assert np.all(study.estimates > 0.0)
    assert np.all(study.estimates <= 1.0)
    assert np.all(study.standard_errors >= 0.0)
    assert study.lipschitz[1] > study.lipschitz[0]


def test_derivative_moment_rejects_small_ensembles(step_drift, seed):
    """Test the minimum ensemble size"""
    family = [mollify(step_drift, 4)]
    with pytest.raises(EstimationError):
        derivative_moment(family, 2.0, 0.5, [0.0], EnsembleSpec(seed=seed, size=50, dt=0.01))


def test_derivative_moment_needs_smooth_members(step_drift, seed):
    """Test that an unmollified step is refused"""
    with pytest.raises(HypothesisError):
        derivative_moment([step_drift], 2.0, 0.5, [0.0], EnsembleSpec(seed=seed, size=100, dt=0.01))


def test_derivative_moment_needs_shared_bound(seed):
    """Test that members must share one sup bound"""
    family = [make_standard_fields("sine", {"amplitude": 1.0}), make_standard_fields("sine", {"amplitude": 2.0})]
    with pytest.raises(HypothesisError):
        derivative_moment(family, 2.0, 0.5, [0.0], EnsembleSpec(seed=seed, size=100, dt=0.01))


def _moment_study(estimates, standard_errors):
    estimates = np.asarray(estimates, dtype=float)
    return DerivativeMomentStudy(
        levels=[4 ** (i + 1) for i in range(len(estimates))], p=2.0, t=1.0, estimates=estimates,
        standard_errors=np.asarray(standard_errors, dtype=float), lipschitz=np.ones(len(estimates)),
    )


def test_trend_detection():
    """Test the weighted log-log slope of estimates against level"""
    growing = _moment_study([2.0, 4.0, 8.0], [0.02, 0.04, 0.08])
    slope, se = growing.trend()
    assert slope == pytest.approx(0.5)
    assert se > 0.0
    assert growing.positive_trend()
    assert growing.ratio == pytest.approx(4.0)

    exact = _moment_study([2.0, 4.0, 8.0], np.zeros(3))
    assert exact.trend() == (pytest.approx(0.5), pytest.approx(0.0))
    assert exact.positive_trend()

    flat = _moment_study([0.5, 0.5, 0.5], np.zeros(3))
    assert not flat.positive_trend()

    assert _moment_study([1.0, 2.0], [0.1, 0.1]).trend()[1] == float("inf")


def test_saturating_estimates_show_no_trend():
    """Test that step-family estimates levelling off within their errors are not a trend"""
    study = _moment_study([0.789828, 0.806395, 0.810035], [0.003, 0.003, 0.003])
    slope, se = study.trend()
    assert 0.0 < slope < 0.02
    assert not study.positive_trend()
    assert study.ratio <= 1.5


def test_gaussian_moment_certificate():
    """Test int (1 + x^2) exp(-x^2 / 2) = 2 sqrt(2 pi)"""
    weight = gaussian_weight(1, 2.0)
    cert = moment_certificate(weight, 8.0)
    assert cert.value == pytest.approx(2.0 * np.sqrt(2.0 * np.pi), rel=1e-8)
    assert cert.tail < 1e-8
    chosen = choose_radius(weight)
    assert chosen.tail < 1e-3 * chosen.value


def test_growing_weight_has_no_certificate():
    """Test that a weight that does not decay is rejected"""
    with pytest.raises(QuadratureError):
        choose_radius(power_weight(1, 2.0, 1.0))


def test_sobolev_norm_of_identity(zero_drift, unit_path):
    """Test the identity map against the closed form 2 (2 pi)^(1/4)"""
    lattice = make_lattice(-8.0, 8.0, 321)
    flow = simulate_flow(zero_drift, unit_path, 0.0, 0.0, 1, lattice, 0.01)
    norm = weighted_sobolev_norm(flow, variational_jacobian(zero_drift, flow), gaussian_weight(1, 2.0))
    root = (2.0 * np.pi) ** 0.25
    assert norm.lp_part == pytest.approx(root, rel=1e-6)
    assert norm.derivative_parts[0, 0] == pytest.approx(root, rel=1e-6)
    assert norm.value == pytest.approx(2.0 * root, rel=1e-6)


def test_sobolev_norm_rejects_vanishing_weight(zero_drift, unit_path, small_lattice):
    """Test that a weight vanishing on a node is refused"""
    flow = simulate_flow(zero_drift, unit_path, 0.0, 0.0, 1, small_lattice, 0.01)
    with pytest.raises(QuadratureError):
        weighted_sobolev_norm(flow, variational_jacobian(zero_drift, flow), power_weight(1, 2.0, 1.0))


def test_sobolev_norm_dimension_mismatch(zero_drift, unit_path, small_lattice):
    """Test that the weight must live on the lattice dimension"""
    flow = simulate_flow(zero_drift, unit_path, 0.0, 0.0, 1, small_lattice, 0.01)
    with pytest.raises(GridError):
        weighted_sobolev_norm(flow, variational_jacobian(zero_drift, flow), gaussian_weight(2, 2.0))


def test_ap_constant_weight():
    """Test that gamma = 0 gives products equal to one"""
    result = ap_diagnostic(0.0, 2.0, 1, [1e-3, 1e-1, 10.0])
    assert result.verdict == "finite"
    assert np.all(result.products == 1.0)


def test_ap_admissible_power():
    """Test the constant 4/3 for gamma = 1/2, p = 2, d = 1"""
    result = ap_diagnostic(0.5, 2.0, 1, [1e-3, 1e-2, 1.0, 10.0], off_center=[([2.0], 1.0)])
    assert result.verdict == "finite"
    assert np.allclose(result.products, 4.0 / 3.0)
    assert result.off_center_products[0] >= 1.0
    assert result.supremum >= 4.0 / 3.0


def test_ap_diverging_power():
    """Test that gamma = 2, p = 2 grows without bound"""
    result = ap_diagnostic(2.0, 2.0, 1, [1e-3, 1e-2, 1.0, 10.0])
    assert result.verdict == "diverging"
    assert result.supremum == float("inf")


def test_ap_input_checks():
    """Test non-integrable exponents and short radius spans"""
    with pytest.raises(HypothesisError):
        ap_diagnostic(-1.0, 2.0, 1, [1e-3, 1.0])
    with pytest.raises(EstimationError):
        ap_diagnostic(0.5, 2.0, 1, [0.1, 1.0])
