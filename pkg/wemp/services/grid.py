# wemp/services/grid.py
"""
Two-level structured mesh of the unit square.

Fine nodes are numbered row-major from the origin: node (ix, iy) has id
iy * (n + 1) + ix, fine cell (cx, cy) has id cy * n + cx, with n = Nc * r fine
cells per axis. Interior nodes (those not on the boundary of D) carry the
degrees of freedom, numbered in the same row-major order.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from wemp.exceptions import ConfigurationError, EvaluationError, MeshError

logger = logging.getLogger(__name__)

BOTTOM, RIGHT, TOP, LEFT = 0, 1, 2, 3

# largest |u0| tolerated on the boundary of D
TRACE_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class Patch:
    """Rectangular block of fine cells [cx0, cx1) x [cy0, cy1) with its local node numbering."""

    cell_box: Tuple[int, int, int, int]
    node_ids: np.ndarray
    cell_ids: np.ndarray
    boundary_local: np.ndarray
    interior_local: np.ndarray

    @property
    def nx(self) -> int:
        return self.cell_box[2] - self.cell_box[0]

    @property
    def ny(self) -> int:
        return self.cell_box[3] - self.cell_box[1]

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def local_index(self, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        """Local ids of global node coordinates (ix, iy) lying in the patch."""
        cx0, cy0 = self.cell_box[0], self.cell_box[1]
        return (np.asarray(iy) - cy0) * (self.nx + 1) + (np.asarray(ix) - cx0)


@dataclass(frozen=True, eq=False)
class Edge:
    """
    One side of a neighborhood boundary, nodes listed in increasing coordinate.

    `owned` marks the nodes assigned to this side after corner tie-breaking, so
    the owned nodes of the four sides partition the boundary nodes.
    """

    node: Tuple[int, int]
    side: int
    node_ids: np.ndarray
    local_nodes: np.ndarray
    owned: np.ndarray
    length: float

    @property
    def n_segments(self) -> int:
        return len(self.node_ids) - 1


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """omega_i: the coarse cells sharing coarse node `node` = (I, J)."""

    node: Tuple[int, int]
    index: int
    coarse_cells: Tuple[Tuple[int, int], ...]
    interior: bool
    patch: Patch
    edges: Tuple[Edge, ...]

    def trace_nodes(self) -> np.ndarray:
        """Boundary node ids, each listed once, side by side."""
        return np.concatenate([edge.node_ids[edge.owned] for edge in self.edges])


@dataclass(frozen=True, eq=False)
class TwoLevelGrid:
    coarse_cells: int
    refinement: int
    x: np.ndarray
    node_x: np.ndarray
    node_y: np.ndarray
    interior_nodes: np.ndarray
    dof_of_node: np.ndarray
    cell_nodes: np.ndarray
    coarse_nodes: Tuple[Tuple[int, int], ...]
    neighborhoods: Tuple[Neighborhood, ...]

    @property
    def H(self) -> float:
        return 1.0 / self.coarse_cells

    @property
    def h(self) -> float:
        return self.H / self.refinement

    @property
    def n(self) -> int:
        """Fine cells per axis."""
        return self.coarse_cells * self.refinement

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def n_cells(self) -> int:
        return self.n ** 2

    @property
    def n_dofs(self) -> int:
        return len(self.interior_nodes)

    def node_id(self, ix: int, iy: int) -> int:
        return iy * (self.n + 1) + ix

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        centers = 0.5 * (self.x[:-1] + self.x[1:])
        cx, cy = np.meshgrid(centers, centers)
        return cx.ravel(), cy.ravel()

    def coarse_cell_of(self, cell_ids: np.ndarray) -> np.ndarray:
        """Row-major coarse cell id containing each fine cell."""
        cell_ids = np.asarray(cell_ids)
        cx, cy = cell_ids % self.n, cell_ids // self.n
        r = self.refinement
        return (cy // r) * self.coarse_cells + cx // r

    def interior_neighborhoods(self) -> Tuple[Neighborhood, ...]:
        return tuple(nb for nb in self.neighborhoods if nb.interior)

    def neighborhood(self, node: Tuple[int, int]) -> Neighborhood:
        I, J = node
        return self.neighborhoods[J * (self.coarse_cells + 1) + I]

    def coarse_cell_patch(self, CX: int, CY: int) -> Patch:
        r = self.refinement
        return make_patch(self.n, (CX * r, CY * r, (CX + 1) * r, (CY + 1) * r))

    def to_full(self, dofs: np.ndarray) -> np.ndarray:
        """Extend an interior-dof vector by zero boundary values."""
        dofs = np.asarray(dofs)
        if dofs.shape[-1] != self.n_dofs:
            raise MeshError("vector does not match the interior dofs", {"expected": self.n_dofs, "got": dofs.shape[-1]})
        full = np.zeros(dofs.shape[:-1] + (self.n_nodes,))
        full[..., self.interior_nodes] = dofs
        return full

    def to_dofs(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[..., self.interior_nodes]

    def as_node_grid(self, dofs: np.ndarray) -> np.ndarray:
        """(n+1) x (n+1) array of nodal values, row iy, column ix, zero on the boundary."""
        return self.to_full(dofs).reshape(self.n + 1, self.n + 1)


def make_patch(n: int, cell_box: Tuple[int, int, int, int]) -> Patch:
    cx0, cy0, cx1, cy1 = cell_box
    ix, iy = np.meshgrid(np.arange(cx0, cx1 + 1), np.arange(cy0, cy1 + 1))
    node_ids = (iy * (n + 1) + ix).ravel()
    cx, cy = np.meshgrid(np.arange(cx0, cx1), np.arange(cy0, cy1))
    cell_ids = (cy * n + cx).ravel()
    on_boundary = ((ix == cx0) | (ix == cx1) | (iy == cy0) | (iy == cy1)).ravel()
    return Patch(
        cell_box=cell_box,
        node_ids=node_ids,
        cell_ids=cell_ids,
        boundary_local=np.flatnonzero(on_boundary),
        interior_local=np.flatnonzero(~on_boundary),
    )


def _edges(node: Tuple[int, int], patch: Patch, h: float) -> Tuple[Edge, ...]:
    cx0, cy0, cx1, cy1 = patch.cell_box
    xs, ys = np.arange(cx0, cx1 + 1), np.arange(cy0, cy1 + 1)
    sides = {
        BOTTOM: (xs, np.full_like(xs, cy0)),
        RIGHT: (np.full_like(ys, cx1), ys),
        TOP: (xs, np.full_like(xs, cy1)),
        LEFT: (np.full_like(ys, cx0), ys),
    }
    edges = []
    for side in (BOTTOM, RIGHT, TOP, LEFT):
        ix, iy = sides[side]
        local = patch.local_index(ix, iy)
        owned = np.ones(len(local), dtype=bool)
        # corners go to the lowest side index touching them
        if side == RIGHT:
            owned[0] = False
        elif side == TOP:
            owned[-1] = False
        elif side == LEFT:
            owned[0] = owned[-1] = False
        edges.append(Edge(
            node=node,
            side=side,
            node_ids=patch.node_ids[local],
            local_nodes=local,
            owned=owned,
            length=(len(local) - 1) * h,
        ))
    return tuple(edges)


def build_grid(coarse_cells: int, refinement: int) -> TwoLevelGrid:
    """
    Build the coarse mesh T_H with coarse_cells cells per axis, each split into
    refinement x refinement fine cells.

    Raises:
        MeshError: If either count is below 2.
    """
    if int(coarse_cells) != coarse_cells or int(refinement) != refinement:
        raise MeshError("grid counts must be integers", {"Nc": coarse_cells, "r": refinement})
    if coarse_cells < 2 or refinement < 2:
        raise MeshError("degenerate mesh: need Nc >= 2 and r >= 2", {"Nc": coarse_cells, "r": refinement})

    Nc, r = int(coarse_cells), int(refinement)
    n = Nc * r
    h = 1.0 / n
    x = np.arange(n + 1) * h
    gx, gy = np.meshgrid(x, x)
    node_x, node_y = gx.ravel(), gy.ravel()

    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    interior_mask = ((ix > 0) & (ix < n) & (iy > 0) & (iy < n)).ravel()
    interior_nodes = np.flatnonzero(interior_mask)
    dof_of_node = np.full((n + 1) ** 2, -1, dtype=np.int64)
    dof_of_node[interior_nodes] = np.arange(len(interior_nodes))

    # counterclockwise corners of every fine cell
    cx, cy = np.meshgrid(np.arange(n), np.arange(n))
    base = (cy * (n + 1) + cx).ravel()
    cell_nodes = np.stack([base, base + 1, base + n + 2, base + n + 1], axis=1)

    coarse_nodes = tuple((I, J) for J in range(Nc + 1) for I in range(Nc + 1))
    neighborhoods = []
    for index, (I, J) in enumerate(coarse_nodes):
        cells = tuple(
            (CX, CY)
            for CY in (J - 1, J) for CX in (I - 1, I)
            if 0 <= CX < Nc and 0 <= CY < Nc
        )
        box = (max(I - 1, 0) * r, max(J - 1, 0) * r, min(I + 1, Nc) * r, min(J + 1, Nc) * r)
        patch = make_patch(n, box)
        neighborhoods.append(Neighborhood(
            node=(I, J),
            index=index,
            coarse_cells=cells,
            interior=0 < I < Nc and 0 < J < Nc,
            patch=patch,
            edges=_edges((I, J), patch, h),
        ))

    grid = TwoLevelGrid(
        coarse_cells=Nc,
        refinement=r,
        x=x,
        node_x=node_x,
        node_y=node_y,
        interior_nodes=interior_nodes,
        dof_of_node=dof_of_node,
        cell_nodes=cell_nodes,
        coarse_nodes=coarse_nodes,
        neighborhoods=tuple(neighborhoods),
    )
    logger.debug(f"Built grid Nc={Nc}, r={r}: {grid.n_dofs} interior fine dofs")
    return grid


def nodal_interpolate(grid: TwoLevelGrid, g: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Evaluate g at the interior fine nodes (boundary values are implicitly zero).

    Raises:
        EvaluationError: If g is not finite at some node; the first offending
            node's coordinates are reported.
    """
    xs, ys = grid.node_x[grid.interior_nodes], grid.node_y[grid.interior_nodes]
    values = np.broadcast_to(np.asarray(g(xs, ys), dtype=float), xs.shape).copy()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        j = bad[0]
        raise EvaluationError("non-finite value in nodal interpolation", {"x": float(xs[j]), "y": float(ys[j])})
    return values


def boundary_mismatch(grid: TwoLevelGrid, g: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """Largest |g| over the boundary nodes of D."""
    boundary = np.flatnonzero(grid.dof_of_node < 0)
    values = np.broadcast_to(np.asarray(g(grid.node_x[boundary], grid.node_y[boundary]), dtype=float), boundary.shape)
    return float(np.max(np.abs(values))) if boundary.size else 0.0


def check_zero_trace(grid: TwoLevelGrid, g: Callable[[np.ndarray, np.ndarray], np.ndarray],
                     tolerance: float = TRACE_TOLERANCE) -> None:
    """
    Raises:
        ConfigurationError: If g does not vanish on the boundary of D.
    """
    mismatch = boundary_mismatch(grid, g)
    if not mismatch <= tolerance:
        raise ConfigurationError("initial condition does not vanish on the boundary",
                                 {"mismatch": mismatch, "tolerance": tolerance})


def grid_summary(grid: TwoLevelGrid) -> Dict[str, float]:
    return {
        "coarse_cells": grid.coarse_cells,
        "refinement": grid.refinement,
        "H": grid.H,
        "h": grid.h,
        "fine_dofs": grid.n_dofs,
        "interior_coarse_nodes": len(grid.interior_neighborhoods()),
    }
