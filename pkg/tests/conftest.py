import numpy as np
import pytest

from ancestral.model import ModelParams, UniformWindow, example_grid, example_params
from ancestral.pde import solve_stationary
from ancestral.spine import SpineContext

# frozen oracle values for the standard configuration (n=400 on [-4, 4])
LAMBDA_EXAMPLE = 0.9468089648835671


@pytest.fixture(scope="session")
def params():
    return example_params()


@pytest.fixture(scope="session")
def grid():
    return example_grid()


@pytest.fixture(scope="session")
def eigen(params, grid):
    return solve_stationary(params, grid)


@pytest.fixture(scope="session")
def ctx(params, eigen):
    return SpineContext(params, eigen, T_max=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def constant_h(r, gamma=0.0, rho=0.0, eps=0.3, K=1000):
    """Test-only family with ``h == r``: birth ``r``, no natural death."""
    return ModelParams(b=[r], d=[0.0], gamma=gamma, rho=rho, kernel=UniformWindow(eps), K=K, strict=False)
