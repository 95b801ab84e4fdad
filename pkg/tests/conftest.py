import os

import numpy as np
import pytest

from common.models import GaussianSpace
from transport.gauss_core import gaussian_ratio_density, indicator_density, quartic_density, uniform_density


@pytest.fixture
def space_1d():
    return GaussianSpace(dim=1, seed=3)


@pytest.fixture
def space_2d():
    return GaussianSpace(dim=2, quadrature_order=30, seed=3)


@pytest.fixture
def half_gaussian():
    """N(0, 1/4) as a density against N(0, 1)."""
    return gaussian_ratio_density(None, [[0.25]])


@pytest.fixture
def correlated_gaussian():
    return gaussian_ratio_density(None, [[0.5, 0.1], [0.1, 0.3]])


@pytest.fixture
def unit_interval():
    return indicator_density([-1.0], [1.0])


@pytest.fixture
def quartic_1d():
    return quartic_density(1.0, 1)


@pytest.fixture
def uniform_2d():
    return uniform_density(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def scenario_file(tmp_path):
    """Write a scenario file from lines and return its path."""
    def write(name, *lines):
        path = os.path.join(tmp_path, f"{name}.cfg")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        return path

    return write
