import numpy as np
import pytest

from fraccontrol.fracops import assemble
from fraccontrol.lattice import TimeGrid, build_grid, partition


@pytest.fixture(scope="session")
def grid129():
    return build_grid(1, 4.0, 129)


@pytest.fixture(scope="session")
def part129(grid129):
    return partition(grid129, [(1.5, 2.5)])


@pytest.fixture(scope="session")
def op129(grid129):
    return assemble(grid129, 0.5)


@pytest.fixture(scope="session")
def ops129(grid129):
    return {s: assemble(grid129, s) for s in (0.25, 0.5, 0.75)}


@pytest.fixture(scope="session")
def time32():
    return TimeGrid(32)


@pytest.fixture(scope="session")
def grid65():
    return build_grid(1, 4.0, 65)


@pytest.fixture(scope="session")
def part65(grid65):
    return partition(grid65, [(1.5, 2.5)])


@pytest.fixture(scope="session")
def op65(grid65):
    return assemble(grid65, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_interior(rng, part, time):
    v = np.zeros((time.m + 1, part.grid.num_nodes))
    v[:, part.interior] = rng.standard_normal((time.m + 1, part.num_interior))
    return v


def random_control(rng, part, time):
    f = np.zeros((time.m + 1, part.grid.num_nodes))
    f[:, part.control] = rng.standard_normal((time.m + 1, part.num_control))
    return f
