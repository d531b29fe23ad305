import numpy as np
import pytest

from wemp.exceptions import ConfigurationError, EvaluationError, MeshError
from wemp.services.grid import (
    BOTTOM,
    LEFT,
    RIGHT,
    TOP,
    boundary_mismatch,
    build_grid,
    check_zero_trace,
    nodal_interpolate,
)


def test_counts_of_smallest_grid():
    grid = build_grid(2, 2)
    assert grid.n == 4
    assert grid.n_dofs == 9
    assert len(grid.interior_neighborhoods()) == 1
    assert grid.H == 0.5 and grid.h == 0.25


@pytest.mark.parametrize("nc, r", [(1, 4), (4, 1), (2.5, 2)])
def test_degenerate_grid_rejected(nc, r):
    with pytest.raises(MeshError):
        build_grid(nc, r)


def test_node_numbering_is_row_major(small_grid):
    node = small_grid.node_id(3, 2)
    assert small_grid.node_x[node] == pytest.approx(3 * small_grid.h)
    assert small_grid.node_y[node] == pytest.approx(2 * small_grid.h)
    assert small_grid.dof_of_node[small_grid.node_id(0, 5)] == -1
    assert small_grid.dof_of_node[small_grid.node_id(1, 1)] == 0


def test_interior_neighborhood_geometry(small_grid):
    nb = small_grid.neighborhood((2, 2))
    assert nb.interior
    assert nb.patch.cell_box == (4, 4, 12, 12)
    assert len(nb.coarse_cells) == 4
    for edge in nb.edges:
        assert edge.n_segments == 2 * small_grid.refinement
        assert edge.length == pytest.approx(2 * small_grid.H)


def test_boundary_neighborhood_is_clipped(small_grid):
    nb = small_grid.neighborhood((0, 0))
    assert not nb.interior
    assert nb.patch.cell_box == (0, 0, 4, 4)
    assert nb.coarse_cells == ((0, 0),)


def test_corner_ownership_partitions_boundary(small_grid):
    for nb in small_grid.neighborhoods:
        trace = nb.trace_nodes()
        assert len(trace) == len(set(trace.tolist()))
        assert set(trace.tolist()) == set(nb.patch.node_ids[nb.patch.boundary_local].tolist())


def test_corner_owners(small_grid):
    nb = small_grid.neighborhood((1, 1))
    edges = {edge.side: edge for edge in nb.edges}
    bottom_left, bottom_right = edges[BOTTOM].node_ids[0], edges[BOTTOM].node_ids[-1]
    top_left, top_right = edges[TOP].node_ids[0], edges[TOP].node_ids[-1]
    assert edges[BOTTOM].owned[0] and edges[BOTTOM].owned[-1]
    assert edges[RIGHT].node_ids[-1] == top_right and edges[RIGHT].owned[-1]
    assert edges[TOP].node_ids[0] == top_left and edges[TOP].owned[0]
    assert edges[LEFT].node_ids[0] == bottom_left and not edges[LEFT].owned[0]
    assert edges[RIGHT].node_ids[0] == bottom_right and not edges[RIGHT].owned[0]


def test_full_and_dof_vectors(small_grid, rng):
    dofs = rng.standard_normal(small_grid.n_dofs)
    full = small_grid.to_full(dofs)
    assert np.array_equal(small_grid.to_dofs(full), dofs)
    assert np.all(full[small_grid.dof_of_node < 0] == 0.0)
    with pytest.raises(MeshError):
        small_grid.to_full(dofs[:-1])


def test_coarse_cell_of(small_grid):
    r, n = small_grid.refinement, small_grid.n
    cell = (2 * r + 1) * n + (3 * r + 2)
    assert small_grid.coarse_cell_of(np.array([cell]))[0] == 2 * small_grid.coarse_cells + 3


def test_nodal_interpolate_reports_bad_node(small_grid):
    with pytest.raises(EvaluationError) as info:
        nodal_interpolate(small_grid, lambda x, y: np.where((x == 0.5) & (y == 0.25), np.nan, x))
    assert info.value.context == {"x": 0.5, "y": 0.25}


def test_boundary_mismatch(small_grid):
    assert boundary_mismatch(small_grid, lambda x, y: x * (1 - x) * y * (1 - y)) == 0.0
    assert boundary_mismatch(small_grid, lambda x, y: 1.0 + 0 * x) == 1.0


def test_check_zero_trace(small_grid):
    check_zero_trace(small_grid, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    with pytest.raises(ConfigurationError) as info:
        check_zero_trace(small_grid, lambda x, y: 1e-6 + 0 * x)
    assert info.value.context["mismatch"] == 1e-6
    with pytest.raises(ConfigurationError):
        check_zero_trace(small_grid, lambda x, y: np.nan * x)
