import numpy as np
import pytest

from cdul.dataset import load_images, make_synthetic_dataset
from cdul.encoder import SyntheticBackend


@pytest.fixture(scope="session")
def syn_manifest():
    return make_synthetic_dataset(64, 5, seed=0)


@pytest.fixture(scope="session")
def syn_images(syn_manifest):
    return load_images([s.image_path for s in syn_manifest.samples])


@pytest.fixture(scope="session")
def clean_backend():
    return SyntheticBackend(5, dim=32, noise=0.0, seed=0)


@pytest.fixture(scope="session")
def noisy_backend():
    return SyntheticBackend(5, dim=32, noise=0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
