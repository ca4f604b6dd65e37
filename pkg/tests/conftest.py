import numpy as np
import pytest

from chatsplat.rasterizer import set_thread_count
from chatsplat.synth import make_synthetic_scene, perfect_classifier

THREADS = 2


def pytest_configure(config):
    set_thread_count(THREADS)


@pytest.fixture(scope="session")
def tiny_scene():
    """2 objects x 100 Gaussians, 56x56, 2 cameras, planted one-hot identity."""
    return make_synthetic_scene(2, 100, seed=5, width=56, height=56, n_cameras=2,
                                d_g=8, d_id=8, identity="onehot")


@pytest.fixture(scope="session")
def tiny_classifier(tiny_scene):
    return perfect_classifier(tiny_scene.object_count, tiny_scene.gaussians.d_id)


def random_gaussians(n, seed=0, d_g=8, d_id=4):
    from chatsplat.synth import random_scene

    return random_scene(n, seed=seed, d_g=d_g, d_id=d_id)


@pytest.fixture
def rng():
    return np.random.default_rng(123)
