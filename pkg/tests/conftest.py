import numpy as np
import pytest

from goalpair_cvae.goals import GoalGrid
from goalpair_cvae.marginal import train_marginal
from goalpair_cvae.sim import generate_dataset, to_arrays


@pytest.fixture(scope="session")
def toy_arrays():
    return to_arrays(generate_dataset(500, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    """(train, held-out) arrays large enough for quick model fits."""
    return to_arrays(generate_dataset(3000, seed=0)), to_arrays(generate_dataset(500, seed=1))


@pytest.fixture(scope="session")
def toy_train():
    return to_arrays(generate_dataset(10000, seed=0))


@pytest.fixture(scope="session")
def toy_marginal(toy_train):
    """Marginal model with the default configuration on 10k scenarios."""
    grid = GoalGrid.covering(toy_train.endpoints.ravel(), 16)
    net, _ = train_marginal(toy_train, grid, grid)
    return net


@pytest.fixture(scope="session")
def toy_grid(toy_train):
    return GoalGrid.covering(toy_train.endpoints.ravel(), 16)
