#!/usr/bin/env python3
"""
Tests for the drift catalog, mollification and the Lamperti reduction
"""

import numpy as np
import pytest
from scipy import integrate

from flowlab.core.exceptions import CatalogError, HypothesisError, QuadratureError
from flowlab.services.fields import (
    MollifierFamily,
    describe_catalog,
    lamperti_transform,
    make_standard_fields,
    mollify,
    sample_sup_check,
)


def test_unknown_catalog_key():
    """Test that an unknown key is rejected"""
    with pytest.raises(CatalogError):
        make_standard_fields("no_such_field")


def test_unknown_parameter():
    """Test that parameters outside the entry's list are rejected"""
    with pytest.raises(CatalogError) as excinfo:
        make_standard_fields("sign", {"slope": 2.0})
    assert "slope" in str(excinfo.value)


def test_step_levels_must_decrease():
    """Test that an increasing step is not accepted as monotone"""
    with pytest.raises(CatalogError):
        make_standard_fields("step_monotone", {"levels": [1.0, 2.0]})


def test_one_dimensional_entries_reject_d():
    """Test that scalar-only entries refuse d > 1"""
    with pytest.raises(CatalogError):
        make_standard_fields("sign", {"d": 2})


def test_sign_values():
    """Test the sign drift on both sides and at the jump"""
    drift = make_standard_fields("sign", {"level": 1.5})
    values = drift.eval(0.0, np.array([[-1.0], [0.0], [2.0]]))[:, 0]
    assert values.tolist() == [1.5, -1.5, -1.5]
    assert drift.monotone_decreasing
    assert drift.one_sided_bound is None


def test_step_flags(step_drift):
    """Test the structural flags of the monotone step"""
    assert step_drift.piecewise_constant
    assert step_drift.monotone_decreasing
    assert step_drift.one_sided_bound == (1.0,)
    assert step_drift.one_sided_sign == (1,)
    assert step_drift.discontinuities == ((0.0,),)
    assert not step_drift.smooth


def test_sup_bound_holds_on_samples():
    """Test that sampled values never exceed the declared sup bound"""
    for key in ["zero", "constant", "linear_ou", "sign", "step_monotone", "tanh_step", "sine", "time_periodic"]:
        drift = make_standard_fields(key)
        assert sample_sup_check(drift) <= drift.sup_bound + 1e-12, key
    bump = make_standard_fields("gaussian_bump", {"d": 2, "center": [0.5, 0.0]})
    assert sample_sup_check(bump) <= bump.sup_bound + 1e-12


def test_step_has_no_jacobian(step_drift):
    """Test that asking a step drift for its Jacobian fails"""
    with pytest.raises(HypothesisError):
        step_drift.eval_jacobian(0.0, np.zeros((1, 1)))


def test_describe_catalog_lists_params():
    """Test the catalog description used by the CLI"""
    catalog = describe_catalog()
    assert "zero" in catalog
    assert catalog["step_monotone"]["params"] == ["d", "levels", "threshold"]


def test_mollified_sign_vanishes_at_jump():
    """Test that symmetric quadrature pieces cancel at the discontinuity"""
    drift = make_standard_fields("sign")
    member = mollify(drift, 8)
    assert abs(member.eval(0.0, np.zeros((1, 1)))[0, 0]) < 1e-12


def test_mollified_sign_away_from_jump():
    """Test that the mollified step equals the step outside the bump support"""
    drift = make_standard_fields("sign")
    member = mollify(drift, 10)
    values = member.eval(0.0, np.array([[-0.5], [0.5]]))[:, 0]
    assert values.tolist() == [1.0, -1.0]


def test_mollified_derivative_scales_with_n():
    """Test that the slope at the jump grows linearly in n"""
    drift = make_standard_fields("sign")
    slope_4 = mollify(drift, 4).eval_jacobian(0.0, np.zeros((1, 1)))[0, 0, 0]
    slope_16 = mollify(drift, 16).eval_jacobian(0.0, np.zeros((1, 1)))[0, 0, 0]
    assert slope_4 < 0
    assert slope_16 / slope_4 == pytest.approx(4.0, rel=1e-9)


def test_mollified_smooth_drift_is_close():
    """Test that mollifying a smooth drift moves it by O(1/n)"""
    drift = make_standard_fields("sine")
    x = np.linspace(-2.0, 2.0, 11)[:, None]
    member = mollify(drift, 50)
    assert np.max(np.abs(member.eval(0.0, x) - drift.eval(0.0, x))) < 1e-3


def test_mollified_plane_drift_uses_radial_bump():
    """Test the non-componentwise mollifier against the radial bump average at the origin"""
    drift = make_standard_fields("gaussian_bump", {"d": 2})
    eps = 0.5

    def bump(r):
        return r * np.exp(-1.0 / (1.0 - r * r))

    weighted, _ = integrate.quad(lambda r: bump(r) * np.exp(-0.5 * (eps * r) ** 2), 0.0, 1.0)
    mass, _ = integrate.quad(bump, 0.0, 1.0)
    value = mollify(drift, 2).eval(0.0, np.zeros((1, 2)))[0]
    assert value == pytest.approx([weighted / mass] * 2, rel=1e-4)


def test_mollified_plane_jacobian_matches_differences():
    """Test the radial mollifier Jacobian against central differences of the member"""
    member = mollify(make_standard_fields("gaussian_bump", {"d": 2}), 4)
    x, h = np.array([[0.3, -0.2]]), 1e-5
    jacobian = member.eval_jacobian(0.0, x)[0]
    for j in range(2):
        step = np.zeros((1, 2))
        step[0, j] = h
        numeric = (member.eval(0.0, x + step) - member.eval(0.0, x - step))[0] / (2.0 * h)
        assert jacobian[:, j] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_low_quadrature_order_rejected():
    """Test the minimum quadrature order"""
    with pytest.raises(QuadratureError):
        MollifierFamily(base=make_standard_fields("sign"), order=4)


def test_mollification_index_must_be_positive():
    """Test that n = 0 is not a member of the family"""
    with pytest.raises(CatalogError):
        MollifierFamily(base=make_standard_fields("sign")).member(0)


def test_lamperti_constant_sigma(ou_drift):
    """Test that constant sigma reduces to a rescaling"""
    sigma = 0.5
    transform = lamperti_transform(ou_drift, lambda y: np.full(np.shape(y), sigma), (-3.0, 3.0))
    x = np.linspace(-2.5, 2.5, 7)
    assert np.allclose(transform.forward(x), x / sigma, atol=1e-9)
    assert np.allclose(transform.inverse(transform.forward(x)), x, atol=1e-9)
    z = transform.forward(x)
    expected = -x / sigma
    assert np.allclose(transform.drift.eval(0.0, z[:, None])[:, 0], expected, atol=1e-7)


def test_lamperti_domain_must_contain_origin(ou_drift):
    """Test that Lambda is anchored at 0"""
    with pytest.raises(QuadratureError):
        lamperti_transform(ou_drift, lambda y: np.ones(np.shape(y)), (1.0, 2.0))


def test_lamperti_rejects_vanishing_sigma(ou_drift):
    """Test that sigma must stay positive on the domain"""
    with pytest.raises(QuadratureError):
        lamperti_transform(ou_drift, lambda y: np.asarray(y, dtype=float), (-1.0, 1.0))
