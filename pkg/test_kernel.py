#!/usr/bin/env python3
"""
Tests for heat-kernel estimates, iterated integrals and string expansions
"""

import numpy as np
import pytest

from flowlab.core.exceptions import EstimationError, HypothesisError, QuadratureError
from flowlab.services.fields import make_standard_fields
from flowlab.services.kernel import (
    HeatKernel,
    allowed,
    bound_value,
    gamma_rate_fit,
    iterated_integral,
    kernel_l1_derivative,
    string_expansion,
    string_expansion_numeric_check,
)

SIN_ORACLE = 2.0 * (1.0 - np.exp(-0.5))


@pytest.fixture
def sine():
    return make_standard_fields("sine")


def test_heat_kernel_mass():
    """Test that the kernel integrates to one"""
    assert HeatKernel(1).mass(0.3) == pytest.approx(1.0, abs=1e-10)
    assert HeatKernel(2).mass(2.0) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(HypothesisError):
        HeatKernel(1).mass(0.0)


def test_heat_kernel_derivatives():
    """Test the analytic gradient and Hessian at a sample point"""
    kernel = HeatKernel(2)
    z = np.array([0.3, -0.4])
    value = kernel.eval(0.5, z)
    assert np.allclose(kernel.gradient(0.5, z), -z / 0.5 * value)
    assert kernel.hessian(0.5, z).shape == (2, 2)
    assert kernel.hessian(0.5, z)[0, 1] == pytest.approx(z[0] * z[1] / 0.25 * value)


def test_first_derivative_l1_scaling():
    """Test ||grad P_t||_1 sqrt(t) = sqrt(2 / pi)"""
    for t in [0.01, 0.5, 4.0]:
        assert kernel_l1_derivative(t, 1) * np.sqrt(t) == pytest.approx(np.sqrt(2.0 / np.pi), rel=1e-12)


def test_second_derivative_l1_scaling():
    """Test the t^-1 scaling of second derivatives and their constants"""
    for t in [0.1, 2.0]:
        assert kernel_l1_derivative(t, 2, (0, 1)) * t == pytest.approx(2.0 / np.pi, rel=1e-8)
        assert kernel_l1_derivative(t, 2, (0, 0)) * t == pytest.approx(4.0 / np.sqrt(2.0 * np.pi * np.e), rel=1e-8)
    with pytest.raises(HypothesisError):
        kernel_l1_derivative(1.0, 3)


def test_string_counts_and_rendering():
    """Test 2^(n-1) allowed strings per order"""
    for n in [1, 2, 3]:
        terms = string_expansion(n)
        assert len(terms) == 2 ** (n - 1)
        assert all(allowed(term) for term in terms)
        assert all(term.n == n for term in terms)
    assert [term.render() for term in string_expansion(1)] == ["-[D1P]"]
    assert [term.render() for term in string_expansion(2)] == ["+[D1P . D2P]", "-[P . D1D2P]"]
    with pytest.raises(HypothesisError):
        string_expansion(4)


def test_bound_value():
    """Test C^n prod ||b|| (t - t0)^(n/2) / Gamma(n/2 + 1)"""
    assert bound_value([1.0], 0.0, 1.0, 10.0) == pytest.approx(20.0 / np.sqrt(np.pi))
    assert bound_value([1.0, 2.0], 0.5, 1.5, 1.0) == pytest.approx(2.0)


def test_sin_oracle_quadrature(sine):
    """Test J_1 for b = sin against 2 (1 - exp(-t/2))"""
    result = iterated_integral([sine], [0], 0.0, 1.0)
    assert result.estimate == pytest.approx(SIN_ORACLE, rel=1e-6)
    assert result.se == 0.0
    assert abs(result.estimate) <= result.bound
    assert result.to_record()["C_used"] == 10.0


def test_symmetric_bump_integral_vanishes():
    """Test that an odd derivative integrates to zero from the bump center"""
    bump = make_standard_fields("gaussian_bump")
    assert abs(iterated_integral([bump], [0], 0.0, 1.0).estimate) < 1e-12


@pytest.mark.slow
def test_sin_oracle_monte_carlo(sine, seed):
    """Test the Monte-Carlo route within 5 SE and independent of threads"""
    one = iterated_integral([sine], [0], 0.0, 1.0, method="monte_carlo", budget=100_000, seed=seed, threads=1)
    many = iterated_integral([sine], [0], 0.0, 1.0, method="monte_carlo", budget=100_000, seed=seed, threads=4)
    assert one.se > 0.0
    assert abs(one.estimate - SIN_ORACLE) < 5 * one.se
    assert one.estimate == many.estimate
    assert one.se == many.se


def test_expansion_identity(sine):
    """Test that the allowed strings add up to J_2"""
    check = string_expansion_numeric_check([sine, sine], [0, 0], 0.0, 1.0)
    assert len(check.term_values) == 2
    assert check.discrepancy <= 1e-4


def test_iterated_integral_input_checks(sine, step_drift):
    """Test rejected families, windows and methods"""
    with pytest.raises(HypothesisError):
        iterated_integral([step_drift], [0], 0.0, 1.0)
    with pytest.raises(HypothesisError):
        iterated_integral([sine], [0], 1.0, 1.0)
    with pytest.raises(HypothesisError):
        iterated_integral([sine] * 4, [0] * 4, 0.0, 1.0)
    with pytest.raises(HypothesisError):
        iterated_integral([sine], [0, 0], 0.0, 1.0)
    with pytest.raises(HypothesisError):
        iterated_integral([sine], [0], 0.0, 1.0, method="trapezoid")
    with pytest.raises(EstimationError):
        iterated_integral([sine], [0], 0.0, 1.0, method="monte_carlo", budget=1)


def test_tensor_quadrature_size_limit():
    """Test that large n * d needs the Monte-Carlo route"""
    bump = make_standard_fields("gaussian_bump", {"d": 2})
    with pytest.raises(QuadratureError):
        iterated_integral([bump] * 3, [0, 1, 0], 0.0, 1.0)


def test_gamma_rate_fit():
    """Test the log-log slope on synthetic data and the fit guards"""
    gaps = np.geomspace(1e-3, 1e-1, 6)
    fit = gamma_rate_fit(gaps, 3.0 * gaps**1.5)
    assert fit.slope == pytest.approx(1.5)
    assert fit.intercept == pytest.approx(np.log(3.0))
    with pytest.raises(EstimationError):
        gamma_rate_fit(gaps[:4], gaps[:4])
    with pytest.raises(EstimationError):
        gamma_rate_fit(np.linspace(0.1, 0.2, 6), np.ones(6))
    with pytest.raises(EstimationError):
        gamma_rate_fit(gaps, np.ones(6), noise=np.ones(6))
