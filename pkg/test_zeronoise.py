#!/usr/bin/env python3
"""
Tests for zero-noise limits, local-time derivatives and W^{1,2} studies
"""

import numpy as np
import pytest

from flowlab.core.exceptions import GridError, HullExitError, HypothesisError
from flowlab.core.rng import stream_id_for
from flowlab.services.fields import make_standard_fields
from flowlab.services.flow import make_lattice
from flowlab.services.paths import sample_path
from flowlab.services.zeronoise import (
    check_zero_noise_hypotheses,
    contraction_and_group_check,
    crossing_check,
    deterministic_ode_oracle,
    extrapolate,
    local_time_derivative,
    ode_residual,
    oracle_error,
    run_zero_noise,
    seed_independence,
    summary,
    w12_norm_study,
)

# dyadic step so that noise scaled by 1/n sums without rounding
DT = 2.0**-7
GRID = np.linspace(-1.0, 1.0, 21)


@pytest.fixture
def constant_drift():
    return make_standard_fields("constant", {"value": 1.0})


@pytest.fixture
def constant_study(constant_drift, seed):
    return run_zero_noise(constant_drift, GRID, 1.0, DT, [4, 16, 64], seed=seed)


def test_hypotheses():
    """Test which drifts the zero-noise theory accepts"""
    assert check_zero_noise_hypotheses(make_standard_fields("step_monotone")) == 1.0
    for key in ["zero", "sign", "linear_ou", "time_periodic"]:
        with pytest.raises(HypothesisError):
            check_zero_noise_hypotheses(make_standard_fields(key))
    increasing = make_standard_fields("componentwise_step", {"d": 1, "levels": [[1.0, 2.0]], "thresholds": [0.0]})
    with pytest.raises(HypothesisError):
        check_zero_noise_hypotheses(increasing)


def test_constant_drift_limit_is_exact(constant_study):
    """Test that the noise cancels exactly in the extrapolated limit"""
    expected = GRID[None, :] + constant_study.times[:, None]
    assert constant_study.method == "richardson"
    assert np.max(np.abs(constant_study.limit[..., 0] - expected)) < 1e-12
    assert constant_study.trajectories.shape == (3, 129, 21, 1)
    assert constant_study.extrapolation_gap > 0.0


def test_levels_share_one_path(constant_study):
    """Test that every level sees the same path scaled by 1/n"""
    noise_4 = constant_study.level(4) - constant_study.limit
    noise_16 = constant_study.level(16) - constant_study.limit
    assert np.allclose(noise_4, 4.0 * noise_16, atol=1e-12)


def test_ode_residual_and_oracle(constant_study, constant_drift):
    """Test the limit against the noise-free equation"""
    assert ode_residual(constant_study.limit, constant_drift, DT) < 1e-12
    assert oracle_error(constant_study) < 1e-12
    times, states = deterministic_ode_oracle(constant_drift, GRID, 1.0, DT)
    assert times[-1] == 1.0
    assert np.max(np.abs(states[-1, :, 0] - (GRID + 1.0))) < 1e-12


def test_contraction_and_group_law(constant_study):
    """Test that a translation neither expands nor breaks the group law"""
    report = contraction_and_group_check(constant_study)
    assert report.expansion_ratio <= 1.0 + 1e-9
    assert report.group_deviation < 1e-12
    assert report.evaluated > 0
    assert report.excluded > 0


def test_crossing_for_constant_drift(constant_study):
    """Test speed exactly m and no thresholds to cross"""
    report = crossing_check(constant_study)
    assert abs(report.speed_margin) < 1e-9
    assert report.max_crossings == 0
    assert report.thresholds == []


def test_w12_study(constant_study):
    """Test the derivative part int_0^T |U| dt for a translation"""
    study = w12_norm_study(constant_study, (-0.55, 0.55))
    assert study.labels == ["n=4", "n=16", "n=64", "limit"]
    assert study.measure == pytest.approx(1.1)
    assert np.allclose(study.derivative_parts, study.measure, atol=1e-9)
    with pytest.raises(GridError):
        w12_norm_study(constant_study, (-1.0, 0.5))


def test_seed_independence(constant_drift, seed):
    """Test that disjoint streams give the same limit"""
    result = seed_independence(constant_drift, GRID, 1.0, DT, [4, 16, 64], seed=seed)
    assert result.passed
    assert result.difference < 1e-12


def test_summary(constant_study):
    """Test the JSON digest"""
    digest = summary(constant_study, (-0.55, 0.55))
    assert digest["method"] == "richardson"
    assert set(digest["w12_norms"]) == {"n=4", "n=16", "n=64", "limit"}


def test_level_validation(constant_drift):
    """Test rejected level lists and lattices"""
    with pytest.raises(GridError):
        run_zero_noise(constant_drift, GRID, 1.0, DT, [4, 4])
    with pytest.raises(GridError):
        run_zero_noise(constant_drift, GRID, 1.0, DT, [0, 4])
    with pytest.raises(GridError):
        run_zero_noise(constant_drift, GRID[::-1], 1.0, DT, [4])


def test_extrapolate_falls_back_to_finest():
    """Test the fallback when the affine fit breaks monotonicity"""
    lattice = make_lattice(0.0, 1.0, 2)
    finest = np.array([[[0.0], [0.1]]])
    coarse = np.array([[[0.0], [1.0]]])
    field, method = extrapolate(np.stack([coarse, finest]), [1, 2], lattice)
    assert method == "finest"
    assert np.array_equal(field, finest)
    field, method = extrapolate(np.stack([finest + 1.0, finest]), [1, 2], lattice)
    assert method == "richardson"
    assert np.allclose(field, finest - 1.0)
    assert extrapolate(finest[None], [4], lattice)[1] == "finest"


@pytest.fixture
def noise_path(seed):
    return sample_path(seed, stream_id_for("local_time", 0), 1, 1.0, 1e-3)


def test_local_time_derivative_smooth_drift(noise_path):
    """Test local-time, variational and finite-difference derivatives agree for a smooth drift"""
    drift = make_standard_fields("tanh_step")
    result = local_time_derivative(drift, 64, noise_path, -1.0)
    assert result.variational is not None
    assert result.representation == pytest.approx(result.variational, rel=0.02)
    assert result.representation == pytest.approx(result.finite_difference, rel=0.1)
    assert 0.0 < result.representation < 1.0
    assert result.truncated_fraction < 1e-9


def test_local_time_derivative_guards(noise_path):
    """Test bin-width, window and dimension guards"""
    drift = make_standard_fields("tanh_step")
    with pytest.raises(GridError):
        local_time_derivative(drift, 64, noise_path, -1.0, bin_width=0.01)
    with pytest.raises(HullExitError):
        local_time_derivative(drift, 64, noise_path, -1.0, window=(-1.01, -0.99))
    plane = make_standard_fields("componentwise_step")
    with pytest.raises(HypothesisError):
        local_time_derivative(plane, 64, noise_path, -1.0)


STEP_DT = 2.0**-10


@pytest.fixture
def step_study(step_drift, seed):
    return run_zero_noise(step_drift, GRID, 1.0, STEP_DT, [16, 64, 256], seed=seed)


def test_step_drift_limit_follows_closed_form(step_study):
    """Test the limit from x = -1 against -1 + 2t until the jump, then t - 1/2"""
    times = step_study.times
    closed = np.where(times <= 0.5, -1.0 + 2.0 * times, times - 0.5)
    start = int(np.flatnonzero(np.isclose(GRID, -1.0))[0])
    assert np.max(np.abs(step_study.limit[:, start, 0] - closed)) <= 0.02
    assert step_study.limit[-1, start, 0] == pytest.approx(0.5, abs=0.02)


def test_step_drift_halves_gaps_after_crossing(step_study):
    """Test that two starts left of the jump end half as far apart once both have crossed"""
    left = int(np.flatnonzero(np.isclose(GRID, -1.0))[0])
    right = int(np.flatnonzero(np.isclose(GRID, -0.5))[0])
    gap = step_study.limit[-1, right, 0] - step_study.limit[-1, left, 0]
    assert gap / 0.5 == pytest.approx(0.5, abs=0.05)
    report = contraction_and_group_check(step_study)
    assert report.expansion_ratio <= 1.02


def test_local_time_derivative_step_drift(noise_path, step_drift):
    """Test that the local-time derivative across the jump matches finite differences near 1/2"""
    result = local_time_derivative(step_drift, 64, noise_path, -1.0)
    assert result.variational is None
    assert result.finite_difference == pytest.approx(0.5, rel=0.1)
    assert result.representation == pytest.approx(result.finite_difference, rel=0.1)
