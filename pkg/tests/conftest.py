import numpy as np
import pytest

from regmor.geometry import PARAM_CENTROID
from regmor.meshgen import channel_mesh, unit_square_mesh


@pytest.fixture(scope="session")
def square_p2():
    return unit_square_mesh(4, 3, p=2)


@pytest.fixture(scope="session")
def square_p1():
    return unit_square_mesh(5, 5, p=1)


@pytest.fixture(scope="session")
def bump_small():
    """Small curved-bottom channel mesh at the centroid geometry."""
    return channel_mesh(PARAM_CENTROID[0], nx=10, ny=4, p=2, wall_grading=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
