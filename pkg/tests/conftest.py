import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carleman_lab.geometry import build_annulus_grid
from carleman_lab.inverse import bump_basis, desk_problem

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def grid():
    return build_annulus_grid(1.0, 2.0, 8, 16, 1.0, 16)


@pytest.fixture(scope="session")
def desk():
    return desk_problem()


@pytest.fixture(scope="session")
def desk_basis(desk):
    return bump_basis(desk.grid, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
