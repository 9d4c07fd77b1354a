#!/usr/bin/env python3
"""
Tests for transport by characteristics and the weak-form residual
"""

import numpy as np
import pytest
from scipy import stats

from flowlab.core.exceptions import GridError, HypothesisError
from flowlab.services.fields import make_standard_fields
from flowlab.services.flow import EnsembleSpec, make_lattice
from flowlab.services.transport import (
    ResidualStudy,
    bump_probe,
    constant_datum,
    du_fourth_moment,
    edge_integrals,
    gaussian_datum,
    gaussian_probe,
    l2_distance,
    lattice_gradient,
    mollification_convergence,
    residual_order,
    solve_transport,
    tanh_datum,
    transport_to_frame,
    weak_residual,
)


@pytest.fixture
def wide_lattice():
    return make_lattice(-6.0, 6.0, 121)


def test_zero_drift_transport_is_exact_translation(zero_drift, unit_path, small_lattice):
    """Test u(t, x) = u0(x - B_t) bit for bit when b = 0"""
    u0 = tanh_datum()
    field = solve_transport(u0, zero_drift, unit_path, 0.5, small_lattice, 0.01)
    origins = small_lattice.points - unit_path.value_at(0.5)
    assert np.array_equal(field.characteristics, origins)
    assert np.array_equal(field.values, u0(origins))


def test_transport_at_time_zero(step_drift, unit_path, small_lattice):
    """Test that u(0) is the datum"""
    u0 = gaussian_datum()
    field = solve_transport(u0, step_drift, unit_path, 0.0, small_lattice, 0.01)
    assert np.array_equal(field.values, u0(small_lattice.points))


def test_max_principle(unit_path, small_lattice):
    """Test sup |u(t)| <= sup |u0| for a discontinuous drift"""
    drift = make_standard_fields("sign")
    field = solve_transport(tanh_datum(), drift, unit_path, 1.0, small_lattice, 0.01)
    assert field.sup <= 1.0


def test_transport_frame(zero_drift, unit_path, small_lattice):
    """Test the lattice table"""
    frame = transport_to_frame(solve_transport(tanh_datum(), zero_drift, unit_path, 0.5, small_lattice, 0.01))
    assert list(frame.columns) == ["x0", "u", "Du0"]
    assert len(frame) == 21


def test_lattice_gradient_of_linear_values(small_lattice):
    """Test that differences reproduce a linear function's slope"""
    values = 2.0 * small_lattice.points[:, 0] + 1.0
    assert np.allclose(lattice_gradient(small_lattice, values)[:, 0], 2.0)


def test_bump_probe_values():
    """Test the bump at its center and its support"""
    theta = bump_probe([0.0], 1.0)
    center = np.zeros((1, 1))
    assert theta.fn(center)[0] == pytest.approx(np.exp(-1.0))
    assert theta.gradient(center)[0, 0] == 0.0
    assert theta.laplacian(center)[0] == pytest.approx(-2.0 * np.exp(-1.0))
    assert theta.fn(np.array([[1.0], [1.5]])).tolist() == [0.0, 0.0]
    x, h = np.array([[0.3]]), 1e-6
    numeric = (theta.fn(x + h) - theta.fn(x - h)) / (2 * h)
    assert theta.gradient(x)[0, 0] == pytest.approx(numeric[0], rel=1e-6)


def test_gaussian_probe_laplacian():
    """Test the Gaussian probe against a second difference"""
    theta = gaussian_probe([0.2], 0.5)
    x, h = np.array([[0.9]]), 1e-4
    numeric = (theta.fn(x + h) - 2 * theta.fn(x) + theta.fn(x - h)) / h**2
    assert theta.laplacian(x)[0] == pytest.approx(numeric[0], rel=1e-5)


def test_residual_vanishes_for_constant_datum(wide_lattice, seed):
    """Test that u0 = 1 leaves only quadrature round-off"""
    drift = make_standard_fields("sign")
    spec = EnsembleSpec(seed=seed, size=50, dt=0.01, study="constant")
    study = weak_residual(constant_datum(), drift, gaussian_probe([0.0], 0.5), 0.1, spec, wide_lattice)
    assert abs(study.mean) < 1e-10
    assert study.abs_mean < 1e-10


def test_residual_zero_drift_within_noise(zero_drift, wide_lattice, seed):
    """Test that the b = 0 residual has no bias beyond sampling error"""
    spec = EnsembleSpec(seed=seed, size=400, dt=0.01, study="residual")
    study = weak_residual(tanh_datum(), zero_drift, gaussian_probe([0.0], 0.5), 0.1, spec, wide_lattice)
    assert study.se > 0.0
    assert abs(study.mean) <= 4.0 * study.se
    assert study.to_record()["M"] == 400


def test_edge_integrals_split_at_the_jump(wide_lattice):
    """Test that edge integrals of b theta for the sign drift are exact with the jump on a node"""
    drift = make_standard_fields("sign")
    theta = gaussian_probe([0.3], 0.5)
    (left, right, values), = edge_integrals(drift, theta, wide_lattice, 0.0)
    assert len(values) == 120
    assert np.array_equal(right, left + 1)
    exact = 0.5 * np.sqrt(2.0 * np.pi) * (1.0 - 2.0 * stats.norm.cdf(0.3 / 0.5))
    assert values.sum() == pytest.approx(exact, abs=1e-10)


def test_sign_drift_residual_within_noise(wide_lattice, seed):
    """Test that the sign-drift residual with the jump on a lattice node has no spatial bias"""
    drift = make_standard_fields("sign")
    spec = EnsembleSpec(seed=seed, size=300, dt=0.001, study="sign_residual")
    study = weak_residual(tanh_datum(), drift, gaussian_probe([0.0], 0.5), 0.1, spec, wide_lattice)
    assert study.se > 0.0
    assert abs(study.mean) <= 4.0 * study.se


def test_residual_threads_do_not_matter(wide_lattice, seed):
    """Test that the residual is the same for any thread count"""
    drift = make_standard_fields("sign")
    spec = EnsembleSpec(seed=seed, size=60, dt=0.01, study="threads")
    theta = gaussian_probe([0.0], 0.5)
    one = weak_residual(tanh_datum(), drift, theta, 0.05, spec, wide_lattice, threads=1)
    many = weak_residual(tanh_datum(), drift, theta, 0.05, spec, wide_lattice, threads=3)
    assert one.mean == many.mean
    assert one.se == many.se


def test_residual_support_and_dimension_checks(zero_drift, seed):
    """Test the probe support and dimension guards"""
    spec = EnsembleSpec(seed=seed, size=10, dt=0.01)
    narrow = make_lattice(-1.0, 1.0, 21)
    with pytest.raises(GridError):
        weak_residual(tanh_datum(), zero_drift, bump_probe([0.0], 1.0), 0.1, spec, narrow)
    plane = make_lattice(-3.0, 3.0, 11, d=2)
    with pytest.raises(HypothesisError):
        weak_residual(tanh_datum(), zero_drift, bump_probe([0.0, 0.0], 1.0), 0.1, spec, plane)


def test_residual_order():
    """Test the measured order of mean |R| in dt"""
    studies = [ResidualStudy(mean=0.0, se=0.0, abs_mean=dt, abs_se=0.0, size=10, dt=dt, h=0.1) for dt in [0.04, 0.02, 0.01]]
    slope, _ = residual_order(studies)
    assert slope == pytest.approx(1.0)


def test_l2_distance_to_itself(wide_lattice, seed):
    """Test that a drift is at distance zero from itself"""
    drift = make_standard_fields("sign")
    spec = EnsembleSpec(seed=seed, size=20, dt=0.01)
    distance, se = l2_distance(tanh_datum(), drift, drift, lambda x: np.exp(-x[:, 0] ** 2), 0.1, spec, wide_lattice)
    assert distance == 0.0
    assert se == 0.0


def test_mollification_levels_must_increase(wide_lattice, seed):
    """Test that the level sequence is ordered"""
    spec = EnsembleSpec(seed=seed, size=20, dt=0.01)
    with pytest.raises(GridError):
        mollification_convergence(
            tanh_datum(), make_standard_fields("sign"), [16, 4], lambda x: np.ones(len(x)), 0.1, spec, wide_lattice
        )


def test_du_fourth_moment_bounded(zero_drift, wide_lattice, seed):
    """Test that translated tanh keeps |Du| <= 1"""
    spec = EnsembleSpec(seed=seed, size=100, dt=0.01)
    moment, se = du_fourth_moment(tanh_datum(), zero_drift, 0.1, spec, wide_lattice)
    assert 0.0 < moment <= 1.0
    assert se >= 0.0
