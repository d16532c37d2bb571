import numpy as np
import pytest

from morphenkf.field import GridGeometry, ScalarField, Warp
from morphenkf.registration import RegistrationConfig

# warp penalties used for desk-size registration problems
DESK_REG = RegistrationConfig(C1=1000.0, C2=100.0)


def bump(geometry, cx, cy, sigma, height=700.0, base=300.0):
    X, Y = geometry.mesh()
    vals = base + height * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma ** 2))
    return ScalarField(geometry, vals, base)


def sine_warp(geometry, level, ax, ay):
    """Displacement ``(ax, ay) * sin(pi x) sin(pi y)`` on normalized coordinates."""
    m = 2 ** level + 1
    s = np.linspace(0.0, 1.0, m)
    prof = np.outer(np.sin(np.pi * s), np.sin(np.pi * s))
    return Warp(level, ax * prof, ay * prof, geometry)


@pytest.fixture
def geom():
    return GridGeometry(41, 33, 80.0, 64.0)


@pytest.fixture
def desk_geom():
    return GridGeometry(125, 125, 250.0, 250.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
