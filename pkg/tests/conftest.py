import numpy as np
import pytest
from hypothesis import settings

from stiefel_dgt.config import preset, resolve
from stiefel_dgt.problems import generate_planted_pca, generate_synthetic_pca

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pca():
    """d=10, r=2, n=4 planted instance with clear gaps."""
    spectrum = np.concatenate([[4.0, 3.0], np.linspace(0.5, 0.1, 8)])
    _, prob = generate_planted_pca(4, 10, 2, 400, spectrum, seed=3)
    return prob


@pytest.fixture(scope="session")
def tiny_synthetic():
    _, prob = generate_synthetic_pca(3, 6, 2, 40, condition_target=5.0, seed=1)
    return prob


@pytest.fixture(scope="session")
def desk():
    return resolve(preset("desk-pca"))
