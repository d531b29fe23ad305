import numpy as np
import pytest

from wemp.configs.presets import SYNTHETIC_INCLUSIONS
from wemp.services.coefficient import Inclusion, build_inclusion_field, homogeneous_field
from wemp.services.fem import assemble_mass, assemble_stiffness
from wemp.services.grid import build_grid
from wemp.services.multiscale import assemble_multiscale_space


def synthetic_field(grid):
    return build_inclusion_field(grid, [Inclusion.rectangle(*box[:4], value=box[4]) for box in SYNTHETIC_INCLUSIONS])


def make_space(coarse_cells=4, refinement=4, level=1, contrast=False, **kwargs):
    grid = build_grid(coarse_cells, refinement)
    kappa = synthetic_field(grid) if contrast else homogeneous_field(grid)
    mass, stiffness = assemble_mass(grid), assemble_stiffness(grid, kappa)
    return assemble_multiscale_space(grid, kappa, level, mass, stiffness, **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_grid():
    return build_grid(4, 4)


@pytest.fixture
def unit_kappa(small_grid):
    return homogeneous_field(small_grid)


@pytest.fixture
def blocky_kappa(small_grid):
    return build_inclusion_field(small_grid, [
        Inclusion.rectangle(0.30, 0.30, 0.45, 0.70, 1e4),
        Inclusion.rectangle(0.60, 0.10, 0.90, 0.20, 1e3),
    ])


@pytest.fixture(scope="session")
def unit_space():
    return make_space(4, 4, level=1)


@pytest.fixture(scope="session")
def contrast_space():
    return make_space(4, 4, level=1, contrast=True)
