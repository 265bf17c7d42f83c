import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gaugelab.geometry import ConvexDomain, build_boundary_grid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def disk():
    """Unit disk inside the disk of radius 2."""
    return ConvexDomain(2, 2.0, 1.0)


@pytest.fixture(scope="session")
def ball3():
    return ConvexDomain(3, 2.0, 1.0)


@pytest.fixture(scope="session")
def grids16(disk):
    return (build_boundary_grid(disk, "ball", "incoming", 16, 16),
            build_boundary_grid(disk, "ball", "outgoing", 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
