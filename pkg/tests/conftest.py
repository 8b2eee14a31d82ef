import os

import numpy as np
import pytest

os.environ.setdefault("OPIK_TRACING", "false")
os.environ.setdefault("MOVING_HW_QUIET", "1")

from moving_hw.mesh_disc import generate_annulus_mesh, generate_ball_mesh, generate_solid_torus_mesh  # noqa: E402
from moving_hw.motions import dilation_motion, identity_motion, pulsating_annulus_motion, shear_motion  # noqa: E402


@pytest.fixture(scope="session")
def anyio_backend():
    return "asyncio"


@pytest.fixture(scope="session")
def annulus():
    return generate_annulus_mesh(2.0, 1.0, 8)


@pytest.fixture(scope="session")
def ball():
    return generate_ball_mesh(1.0, 4)


@pytest.fixture(scope="session")
def torus():
    return generate_solid_torus_mesh(2.0, 0.5, 4)


@pytest.fixture(scope="session")
def identity():
    return identity_motion(1.0)


@pytest.fixture(scope="session")
def dilation():
    return dilation_motion(1.0, 0.2, 1.0)


@pytest.fixture(scope="session")
def shear():
    return shear_motion(0.1, 1.0)


@pytest.fixture(scope="session")
def pulsating():
    return pulsating_annulus_motion(2.0, 1.0, 0.05, 1.0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(7))
