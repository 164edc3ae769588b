import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mddistill.buffer import generate_trajectory
from mddistill.data import gen_toy_dataset
from mddistill.train import Architecture

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """64 pairs in 6-d, 4 clusters: big enough to train on, small enough to be quick."""
    return gen_toy_dataset(64, 6, 4, 0.3, 0.1, seed=3)


@pytest.fixture(scope="session")
def small_arch():
    return Architecture.build(d_img=6, d_txt=6, d_emb=5)


@pytest.fixture(scope="session")
def small_buffer(small_data, small_arch):
    return [
        generate_trajectory(small_data, 3, 16, 0.5, seed=s, arch=small_arch)
        for s in (0, 1)
    ]
