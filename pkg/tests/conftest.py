import numpy as np
import pytest

from cbfctl import Grid, OperatorParams


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


@pytest.fixture
def grid2d():
    return Grid(d=2, n=16)


@pytest.fixture
def grid3d():
    return Grid(d=3, n=8)


@pytest.fixture
def params():
    # 2 * beta * mu = 2 > 1/kappa for kappa = 0.75
    return OperatorParams(mu=1.0, alpha=0.1, beta=1.0)
