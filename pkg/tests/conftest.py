import numpy as np
import pytest

from tailsafe.config import WorldConfig
from tailsafe.world import build_surface, build_world, strike_grid, vix_context


@pytest.fixture(scope="session")
def cfg():
    return WorldConfig()


@pytest.fixture(scope="session")
def surface(cfg):
    return build_surface(cfg)


@pytest.fixture(scope="session")
def teacher(surface):
    return surface.teacher_surface()


@pytest.fixture(scope="session")
def context(cfg):
    return vix_context(cfg)


@pytest.fixture(scope="session")
def strikes(cfg):
    return strike_grid(cfg)


@pytest.fixture(scope="session")
def world(cfg):
    return build_world(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
