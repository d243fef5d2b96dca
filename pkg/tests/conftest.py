import numpy as np
import pytest

from spatialfh.lattice import grid_lattice, load_neighbor_list


@pytest.fixture
def path3():
    return load_neighbor_list("A B\nB C\n")


@pytest.fixture
def path2():
    return load_neighbor_list("A B\n")


@pytest.fixture
def grid4():
    return grid_lattice(4, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
