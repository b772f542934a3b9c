import numpy as np
import pytest

from noonmetro.model import InterferometerModel

REFERENCE = dict(visibility=0.989, eta_t=0.8026, eta_r=0.7941, xi=0.00155)


@pytest.fixture
def ref_model():
    return InterferometerModel(**REFERENCE)


@pytest.fixture
def ideal_model():
    return InterferometerModel(1.0, 1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
