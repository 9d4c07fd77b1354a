"""
Shared fixtures for the flowlab test-suite
"""

import pytest

from flowlab.core.rng import stream_id_for
from flowlab.services.fields import make_standard_fields
from flowlab.services.flow import make_lattice
from flowlab.services.paths import sample_path

SEED = 20240601


@pytest.fixture
def seed():
    return SEED


@pytest.fixture
def zero_drift():
    return make_standard_fields("zero")


@pytest.fixture
def ou_drift():
    return make_standard_fields("linear_ou", {"rate": 1.0})


@pytest.fixture
def step_drift():
    return make_standard_fields("step_monotone")


@pytest.fixture
def small_lattice():
    return make_lattice(-2.0, 2.0, 21)


@pytest.fixture
def unit_path():
    """One-dimensional path on [0, 1] with dt = 0.01"""
    return sample_path(SEED, stream_id_for("tests", 0), 1, 1.0, 0.01)


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "results"
    path.mkdir()
    return path
