#!/usr/bin/env python3
"""
Tests for two-parameter flows, ensembles and Holder fits
"""

import numpy as np
import pytest

from flowlab.core.exceptions import EstimationError, GridError, HorizonError, HypothesisError
from flowlab.services.fields import make_standard_fields
from flowlab.services.flow import (
    EnsembleSpec,
    cocycle_check,
    compose_check,
    flow_to_frame,
    holder_exponents,
    interpolate,
    inverse_flow_check,
    make_lattice,
    monotonicity_check,
    simulate_ensemble,
    simulate_flow,
    simulate_multiplicative_1d,
)


def test_zero_drift_is_translation(zero_drift, unit_path, small_lattice):
    """Test that b = 0 moves every point by the path exactly"""
    flow = simulate_flow(zero_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01)
    expected = unit_path.values[:, None, :] + small_lattice.points[None]
    assert np.array_equal(flow.states, expected)
    assert flow.times[-1] == pytest.approx(1.0)


def test_zero_drift_identities_vanish(zero_drift, unit_path, small_lattice):
    """Test that compose, inverse and cocycle are exact for b = 0"""
    flow = simulate_flow(zero_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01)
    composed = compose_check(flow, 0.0, 0.4, 1.0)
    assert composed.deviation == 0.0
    assert composed.evaluated > 0
    assert inverse_flow_check(zero_drift, unit_path, 0.0, 1.0, small_lattice, 0.01).deviation == 0.0
    assert cocycle_check(zero_drift, unit_path, 0.3, 0.7, small_lattice, 0.01).deviation == 0.0


def test_ou_cocycle_and_inverse(ou_drift, unit_path, small_lattice):
    """Test the cocycle to rounding and the inverse to O(dt) for a smooth drift"""
    assert cocycle_check(ou_drift, unit_path, 0.3, 0.7, small_lattice, 0.01).deviation < 1e-12
    assert inverse_flow_check(ou_drift, unit_path, 0.0, 1.0, small_lattice, 0.01).deviation < 0.1


def test_ou_gaps_shrink_geometrically(ou_drift, unit_path, small_lattice):
    """Test that linear drift contracts every gap by (1 - dt)^K"""
    flow = simulate_flow(ou_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01)
    report = monotonicity_check(flow)
    final = (1.0 - 0.01) ** 100
    assert report.strictly_increasing
    assert report.min_ratio == pytest.approx(final, rel=1e-9)
    assert report.max_ratio == pytest.approx(1.0)


def test_backward_flow_window(ou_drift, unit_path, small_lattice):
    """Test that a backward flow ends at the earlier time"""
    flow = simulate_flow(ou_drift, unit_path, 1.0, 0.5, -1, small_lattice, 0.01)
    assert flow.times[-1] == pytest.approx(0.5)
    assert flow.state_at(0.5).shape == (21, 1)


def test_cocycle_needs_autonomous_drift(unit_path, small_lattice):
    """Test that a time-dependent drift is refused"""
    drift = make_standard_fields("time_periodic")
    with pytest.raises(HypothesisError):
        cocycle_check(drift, unit_path, 0.3, 0.7, small_lattice, 0.01)


def test_flow_past_horizon(zero_drift, unit_path, small_lattice):
    """Test that the path must cover the window"""
    with pytest.raises(HorizonError):
        simulate_flow(zero_drift, unit_path, 0.5, 1.0, 1, small_lattice, 0.01)
    with pytest.raises(GridError):
        simulate_flow(zero_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.02)
    with pytest.raises(GridError):
        simulate_flow(zero_drift, unit_path, 0.0, 1.0, 2, small_lattice, 0.01)


def test_interpolate_constants_and_hull():
    """Test exact constants, linear reproduction and NaN outside the hull"""
    lattice = make_lattice(-1.0, 1.0, 5, d=2)
    constant = np.full((25, 1), 3.7)
    points = np.array([[0.1, -0.3], [0.9, 0.95], [1.5, 0.0]])
    values = interpolate(lattice, constant, points)
    assert values[0, 0] == 3.7 and values[1, 0] == 3.7
    assert np.isnan(values[2, 0])
    linear = (lattice.points @ np.array([2.0, -1.0]))[:, None]
    assert np.allclose(interpolate(lattice, linear, points[:2])[:, 0], points[:2] @ np.array([2.0, -1.0]), atol=1e-12)


def test_flow_to_frame(zero_drift, unit_path, small_lattice):
    """Test the long-format table"""
    frame = flow_to_frame(simulate_flow(zero_drift, unit_path, 0.0, 1.0, 1, small_lattice, 0.01))
    assert list(frame.columns) == ["time", "x_index", "x0", "state0"]
    assert len(frame) == 101 * 21


def test_ensemble_independent_of_threads(ou_drift, seed):
    """Test that chunked ensembles do not depend on the thread count"""
    spec = EnsembleSpec(seed=seed, size=1500, dt=0.01, study="threads")
    ensemble = spec.sample(1, 0.5)
    x = np.array([[-1.0], [0.5]])
    one = simulate_ensemble(ou_drift, ensemble, x, 0.0, 0.5, record_times=[0.25, 0.5], with_jacobian=True, threads=1)
    many = simulate_ensemble(ou_drift, ensemble, x, 0.0, 0.5, record_times=[0.25, 0.5], with_jacobian=True, threads=3)
    assert one.displacement.shape == (2, 1500, 2, 1)
    assert np.array_equal(one.displacement, many.displacement)
    assert np.array_equal(one.jacobian, many.jacobian)


def test_ensemble_record_times_validated(zero_drift, seed):
    """Test that record times outside the window are rejected"""
    ensemble = EnsembleSpec(seed=seed, size=4, dt=0.01).sample(1, 0.5)
    with pytest.raises(GridError):
        simulate_ensemble(zero_drift, ensemble, np.zeros((1, 1)), 0.0, 0.5, record_times=[0.4, 0.2])


@pytest.mark.slow
def test_holder_exponents_zero_drift(zero_drift, seed):
    """Test space exponent 2 exactly and time exponent near 1 for q = 2"""
    spec = EnsembleSpec(seed=seed, size=2000, dt=0.005, study="holder")
    gaps = [0.005, 0.02, 0.05, 0.2]
    fit = holder_exponents(zero_drift, spec, 2, gaps, gaps)
    assert fit.beta_space == pytest.approx(2.0, abs=1e-9)
    assert abs(fit.beta_time - 1.0) < 0.15


def test_holder_needs_enough_probes(zero_drift, seed):
    """Test the probe-count and span requirements"""
    spec = EnsembleSpec(seed=seed, size=10, dt=0.005)
    with pytest.raises(EstimationError):
        holder_exponents(zero_drift, spec, 2, [0.005, 0.2], [0.005, 0.02, 0.2])
    with pytest.raises(EstimationError):
        holder_exponents(zero_drift, spec, 2, [0.01, 0.02, 0.05], [0.005, 0.02, 0.2])
    with pytest.raises(EstimationError):
        holder_exponents(zero_drift, spec, 3, [0.005, 0.02, 0.2], [0.005, 0.02, 0.2])


def test_lamperti_matches_direct_for_constant_sigma(ou_drift, unit_path):
    """Test that both multiplicative routes agree when sigma is constant"""
    sigma = lambda y: np.full(np.shape(y), 0.5)
    x0 = [-1.0, 0.0, 1.0]
    direct = simulate_multiplicative_1d(ou_drift, sigma, unit_path, x0, 0.5, (-5.0, 5.0), route="direct")
    reduced = simulate_multiplicative_1d(ou_drift, sigma, unit_path, x0, 0.5, (-5.0, 5.0), route="lamperti")
    assert np.max(np.abs(direct - reduced)) < 1e-8
    with pytest.raises(HypothesisError):
        simulate_multiplicative_1d(ou_drift, sigma, unit_path, x0, 0.5, (-5.0, 5.0), route="milstein")
