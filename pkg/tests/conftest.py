import numpy as np
import pytest

from fieldloc.camera import CameraIntrinsics
from fieldloc.fields import triad_scene
from fieldloc.render import RenderConfig


@pytest.fixture(scope="session")
def intr():
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=47.5, cy=47.5, width=96, height=96)


@pytest.fixture(scope="session")
def triad():
    return triad_scene()


@pytest.fixture(scope="session")
def filter_render_cfg():
    return RenderConfig(z_near=0.1, z_far=7.0, n_coarse=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
