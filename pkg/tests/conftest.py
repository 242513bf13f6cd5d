import numpy as np
import pytest

from fluororegi.geometry import ProjectionGeometry, compute_app_frame
from fluororegi.phantom import make_phantom

PHANTOM_GEOMETRY = ProjectionGeometry(1020.0, (5.0, 5.0), 64, 64)


@pytest.fixture(scope="session")
def phantom():
    return make_phantom()


@pytest.fixture(scope="session")
def app(phantom):
    return compute_app_frame(phantom.landmarks)


@pytest.fixture(scope="session")
def geom():
    return PHANTOM_GEOMETRY
