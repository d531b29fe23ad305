# wemp/services/multiscale.py
"""
Wavelet-based edge multiscale space.

For every coarse neighborhood omega_i the space holds chi_i times the
kappa-harmonic extensions of the Haar functions on the four sides of
omega_i, plus chi_i times one source-driven function v^i. Columns are
restricted to the interior fine dofs, near-dependent ones are dropped and
the kept columns are orthonormalized in the mass inner product through a
triangular transform, so the dense reduced mass matrix is the identity up
to round-off. Multiscale coefficients always refer to the orthonormalized
functions Phi @ transform.
"""
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sps
from scipy.linalg.lapack import dpstrf
from scipy.sparse.linalg import splu, spsolve

from wemp.exceptions import MeshError, ProjectionError, SolverError
from wemp.models.problem import InitialCondition, SourceTerm
from wemp.services.coefficient import CoefficientField
from wemp.services.fem import (
    LoadAssembler,
    SparseOperator,
    assemble_patch,
    cell_gradient_energy,
    element_matrices,
    gram_matrix,
)
from wemp.services.grid import Neighborhood, Patch, TwoLevelGrid, check_zero_trace, nodal_interpolate
from wemp.services.wavelets import EdgeWaveletBasis, build_haar_basis, edge_inner_products, nodal_traces
from wemp.utils.file_utils import write_node_grid
from wemp.utils.helpers import parallel_map

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-10


class LocalProblem:
    """Q1 operators of -div(kappa grad .) on one patch, with the interior block factorized once."""

    def __init__(self, grid: TwoLevelGrid, kappa: CoefficientField, patch: Patch):
        self.patch = patch
        stiffness, mass = element_matrices(grid.h, grid.h)
        self.stiffness = assemble_patch(patch.nx, patch.ny, stiffness, kappa.values[patch.cell_ids])
        self.mass = assemble_patch(patch.nx, patch.ny, mass, np.ones(len(patch.cell_ids)))
        interior, boundary = patch.interior_local, patch.boundary_local
        self._coupling = self.stiffness[interior][:, boundary].tocsc()
        self._factor = None
        if interior.size:
            try:
                self._factor = splu(self.stiffness[interior][:, interior].tocsc())
            except RuntimeError as e:
                raise SolverError(f"local factorization failed: {e}", {"cell_box": patch.cell_box})
        # position of every local node within boundary_local, -1 for interior nodes
        self.boundary_position = np.full(patch.n_nodes, -1, dtype=np.int64)
        self.boundary_position[boundary] = np.arange(len(boundary))

    def extend(self, boundary_values: np.ndarray) -> np.ndarray:
        """
        Discrete kappa-harmonic extension.

        Args:
            boundary_values: (n_boundary,) or (n_boundary, m) values at
                patch.boundary_local.

        Returns:
            Local nodal values, (n_nodes,) or (n_nodes, m).
        """
        g = np.asarray(boundary_values, dtype=float)
        if g.shape[0] != len(self.patch.boundary_local):
            raise MeshError("boundary data does not match the patch",
                            {"expected": len(self.patch.boundary_local), "got": g.shape[0]})
        out = np.zeros((self.patch.n_nodes,) + g.shape[1:])
        out[self.patch.boundary_local] = g
        if self._factor is not None:
            out[self.patch.interior_local] = self._factor.solve(-(self._coupling @ g))
        return out


def harmonic_extend(grid: TwoLevelGrid, kappa: CoefficientField, neighborhood: Neighborhood,
                    boundary_values: np.ndarray) -> np.ndarray:
    """kappa-harmonic extension into omega_i of data given at its boundary nodes (patch.boundary_local order)."""
    return LocalProblem(grid, kappa, neighborhood.patch).extend(boundary_values)


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """chi_i for every coarse node, stored as columns of a (fine nodes x coarse nodes) matrix."""

    grid: TwoLevelGrid
    matrix: sps.csc_matrix

    def values(self, index: int) -> np.ndarray:
        return self.matrix[:, index].toarray().ravel()

    def local(self, neighborhood: Neighborhood) -> np.ndarray:
        return self.matrix[neighborhood.patch.node_ids, neighborhood.index].toarray().ravel()

    def dofs(self, index: int) -> np.ndarray:
        return self.grid.to_dofs(self.values(index))

    def total(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def partition_defect(self) -> float:
        """max |sum_i chi_i - 1| over interior fine nodes."""
        return float(np.max(np.abs(self.total()[self.grid.interior_nodes] - 1.0)))


def _bilinear_corner_data(patch: Patch, r: int) -> np.ndarray:
    """(n_boundary, 4) values of the coarse hats of the cell corners, counterclockwise from bottom-left."""
    local = patch.boundary_local
    xi = (local % (patch.nx + 1)) / r
    eta = (local // (patch.nx + 1)) / r
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1)


def build_pou(grid: TwoLevelGrid, kappa: CoefficientField) -> PartitionOfUnity:
    """
    Multiscale partition of unity.

    On every coarse cell the four corner functions are the kappa-harmonic
    extensions of the bilinear hats restricted to the cell boundary; values on
    shared cell boundaries agree and are glued.
    """
    kappa.check_grid(grid)
    Nc, r = grid.coarse_cells, grid.refinement
    rows, cols, vals = [], [], []
    for CY in range(Nc):
        for CX in range(Nc):
            patch = grid.coarse_cell_patch(CX, CY)
            local = LocalProblem(grid, kappa, patch).extend(_bilinear_corner_data(patch, r))
            corners = ((CX, CY), (CX + 1, CY), (CX + 1, CY + 1), (CX, CY + 1))
            for c, (I, J) in enumerate(corners):
                support = np.flatnonzero(np.abs(local[:, c]) > 0.0)
                rows.append(patch.node_ids[support])
                cols.append(np.full(support.size, J * (Nc + 1) + I))
                vals.append(local[support, c])

    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    # shared cell boundaries carry identical affine data, keep one copy
    _, first = np.unique(cols * grid.n_nodes + rows, return_index=True)
    matrix = sps.csc_matrix((vals[first], (rows[first], cols[first])), shape=(grid.n_nodes, len(grid.coarse_nodes)))
    pou = PartitionOfUnity(grid=grid, matrix=matrix)
    logger.debug(f"Partition of unity defect {pou.partition_defect():.2e}")
    return pou


def build_weighted_kappa(grid: TwoLevelGrid, kappa: CoefficientField, pou: PartitionOfUnity) -> np.ndarray:
    """kappa_tilde = H^2 kappa sum_i |grad chi_i|^2, cell averages at 2x2 Gauss points."""
    energy = np.zeros(grid.n_cells)
    for neighborhood in grid.neighborhoods:
        patch = neighborhood.patch
        chi = pou.local(neighborhood).reshape(patch.ny + 1, patch.nx + 1)
        energy[patch.cell_ids] += cell_gradient_energy(chi, grid.h, grid.h).ravel()
    return grid.H ** 2 * kappa.values * energy


def source_load_vector(grid: TwoLevelGrid, neighborhood: Neighborhood, kappa_tilde: np.ndarray) -> Optional[np.ndarray]:
    """
    Right-hand side of the Neumann problem for v^i: the normalized kappa_tilde
    source minus the uniform outward flux 1 / |boundary of omega_i|.

    Returns None when kappa_tilde vanishes on omega_i.
    """
    patch = neighborhood.patch
    weights = kappa_tilde[patch.cell_ids]
    total = weights.sum() * grid.h ** 2
    if not total > 0.0:
        return None
    density = weights / total

    rhs = np.zeros(patch.n_nodes)
    cx, cy = np.meshgrid(np.arange(patch.nx), np.arange(patch.ny))
    base = (cy * (patch.nx + 1) + cx).ravel()
    for corner in (base, base + 1, base + patch.nx + 2, base + patch.nx + 1):
        np.add.at(rhs, corner, 0.25 * grid.h ** 2 * density)

    perimeter = sum(edge.length for edge in neighborhood.edges)
    flux = 1.0 / perimeter
    for edge in neighborhood.edges:
        np.add.at(rhs, edge.local_nodes[:-1], -0.5 * grid.h * flux)
        np.add.at(rhs, edge.local_nodes[1:], -0.5 * grid.h * flux)
    return rhs


def solve_source_function(grid: TwoLevelGrid, kappa: CoefficientField, kappa_tilde: np.ndarray,
                          neighborhood: Neighborhood, problem: Optional[LocalProblem] = None) -> Optional[np.ndarray]:
    """
    v^i on omega_i: pure Neumann problem with zero mean, solved with a
    Lagrange multiplier for the mean constraint.

    Returns:
        Local nodal values, or None if kappa_tilde vanishes on omega_i.
    """
    rhs = source_load_vector(grid, neighborhood, kappa_tilde)
    if rhs is None:
        return None
    problem = problem or LocalProblem(grid, kappa, neighborhood.patch)
    weights = problem.mass @ np.ones(problem.patch.n_nodes)
    system = sps.bmat([
        [problem.stiffness, sps.csr_matrix(weights[:, None])],
        [sps.csr_matrix(weights[None, :]), None],
    ], format="csc")
    solution = spsolve(system, np.append(rhs, 0.0))
    v = solution[:-1]
    if not np.all(np.isfinite(v)):
        raise SolverError("Neumann solve for the source function failed", {"node": neighborhood.node})
    return v - (weights @ v) / weights.sum()


@dataclass(frozen=True)
class ColumnTag:
    """Provenance of a basis column: coarse node, side (None for v^i) and function index."""

    node: Tuple[int, int]
    side: Optional[int]
    index: int


@dataclass(frozen=True, eq=False)
class LocalBasis:
    neighborhood: Neighborhood
    chi: np.ndarray
    bases: Tuple[EdgeWaveletBasis, ...]
    extensions: Tuple[np.ndarray, ...]  # per side, (n_nodes, 2^level)
    source: Optional[np.ndarray]

    def columns(self) -> Tuple[np.ndarray, List[ColumnTag]]:
        """Local chi-weighted columns and their tags, sides first, v^i last."""
        blocks, tags = [], []
        for basis, ext in zip(self.bases, self.extensions):
            blocks.append(self.chi[:, None] * ext)
            tags.extend(ColumnTag(self.neighborhood.node, basis.edge.side, j) for j in range(ext.shape[1]))
        if self.source is not None:
            blocks.append((self.chi * self.source)[:, None])
            tags.append(ColumnTag(self.neighborhood.node, None, 0))
        return np.hstack(blocks), tags


def build_local_basis(grid: TwoLevelGrid, kappa: CoefficientField, level: int, pou: PartitionOfUnity,
                      kappa_tilde: np.ndarray, neighborhood: Neighborhood) -> LocalBasis:
    problem = LocalProblem(grid, kappa, neighborhood.patch)
    n_boundary = len(neighborhood.patch.boundary_local)
    bases, extensions = [], []
    for edge in neighborhood.edges:
        basis = build_haar_basis(edge, level)
        traces = nodal_traces(basis)
        data = np.zeros((n_boundary, basis.size))
        positions = problem.boundary_position[edge.local_nodes[edge.owned]]
        data[positions] = traces[:, edge.owned].T
        bases.append(basis)
        extensions.append(problem.extend(data))
    source = solve_source_function(grid, kappa, kappa_tilde, neighborhood, problem)
    return LocalBasis(
        neighborhood=neighborhood,
        chi=pou.local(neighborhood),
        bases=tuple(bases),
        extensions=tuple(extensions),
        source=source,
    )


def _independent_columns(gram: np.ndarray, tolerance: float = PIVOT_TOLERANCE) -> np.ndarray:
    """Columns kept by a pivoted Cholesky of the unit-diagonal scaled Gram matrix, in original order."""
    diagonal = np.diag(gram).copy()
    nonzero = np.flatnonzero(diagonal > 0.0)
    if nonzero.size == 0:
        return nonzero
    scale = 1.0 / np.sqrt(diagonal[nonzero])
    scaled = gram[np.ix_(nonzero, nonzero)] * scale[:, None] * scale[None, :]
    _, piv, rank, info = dpstrf(scaled, tol=tolerance, lower=1)
    if info < 0:
        raise ProjectionError("pivoted Cholesky rejected its input", {"info": info})
    return np.sort(nonzero[piv[:rank] - 1])


def orthonormalizing_transform(gram: np.ndarray) -> np.ndarray:
    """
    Upper triangular T with T^T gram T = I, from the Cholesky factor of the unit-diagonal scaled gram.

    Raises:
        ProjectionError: If the kept columns are still dependent.
    """
    scale = 1.0 / np.sqrt(np.diag(gram))
    scaled = gram * scale[:, None] * scale[None, :]
    try:
        upper = la.cholesky(0.5 * (scaled + scaled.T), lower=False)
    except la.LinAlgError as e:
        raise ProjectionError(f"kept multiscale columns are dependent: {e}", {"columns": gram.shape[0]})
    return scale[:, None] * la.solve_triangular(upper, np.eye(gram.shape[0]), lower=False)


def _congruence(transform: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    product = transform.T @ matrix @ transform
    return 0.5 * (product + product.T)


@dataclass(eq=False)
class MultiscaleSpace:
    """
    span(Phi) with dense reduced operators and per-shift cached factorizations.

    `basis` holds the kept candidate columns in the order of `columns`; the
    functions behind a coefficient vector are basis @ transform.
    """

    grid: TwoLevelGrid
    kappa: CoefficientField
    level: int
    basis: sps.csc_matrix
    transform: np.ndarray
    reduced_mass: np.ndarray
    reduced_stiffness: np.ndarray
    pou: PartitionOfUnity
    kappa_tilde: np.ndarray
    columns: Tuple[ColumnTag, ...]
    dropped: Tuple[ColumnTag, ...]
    skipped: Tuple[Tuple[int, int], ...]
    local_bases: Tuple[LocalBasis, ...]
    mass_op: SparseOperator
    stiffness_op: SparseOperator
    _factors: Dict[float, tuple] = field(default_factory=dict, repr=False)
    _loads: Dict[tuple, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _load_assembler: Optional[LoadAssembler] = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.basis.shape[1]

    @property
    def cached_loads(self) -> int:
        return len(self._loads)

    def reconstruct(self, coefficients: np.ndarray) -> np.ndarray:
        """Fine interior-dof values of Phi T c; a 2-D input is read as one state per row."""
        coefficients = np.asarray(coefficients)
        if coefficients.ndim == 1:
            return self.basis @ (self.transform @ coefficients)
        return np.asarray(self.basis @ (self.transform @ coefficients.T)).T

    def step_factor(self, shift: float):
        """Cholesky factor of reduced_mass + shift * reduced_stiffness, built once per shift."""
        key = float(shift)
        factor = self._factors.get(key)
        if factor is None:
            with self._lock:
                factor = self._factors.get(key)
                if factor is None:
                    try:
                        factor = la.cho_factor(self.reduced_mass + key * self.reduced_stiffness)
                    except la.LinAlgError as e:
                        raise SolverError(f"reduced factorization failed: {e}", {"shift": key})
                    self._factors[key] = factor
        return factor

    def shifted_solve(self, shift: float, rhs: np.ndarray) -> np.ndarray:
        return la.cho_solve(self.step_factor(shift), rhs)

    def project(self, fine: np.ndarray) -> np.ndarray:
        """M-orthogonal projection of interior-dof values onto span(Phi)."""
        rhs = self.transform.T @ (self.basis.T @ (self.mass_op.matrix @ fine))
        return la.cho_solve(self.step_factor(0.0), rhs)

    def project_initial(self, initial: InitialCondition) -> np.ndarray:
        check_zero_trace(self.grid, initial)
        return self.project(nodal_interpolate(self.grid, initial))

    def load(self, source: Optional[SourceTerm], t: float) -> np.ndarray:
        """Reduced load (Phi T)^T F(t), cached per (source, t)."""
        if source is None:
            return np.zeros(self.dimension)
        key = (source, float(t))
        cached = self._loads.get(key)
        if cached is None:
            if self._load_assembler is None:
                with self._lock:
                    if self._load_assembler is None:
                        self._load_assembler = LoadAssembler(self.grid)
            cached = self.transform.T @ (self.basis.T @ self._load_assembler(source, t))
            with self._lock:
                self._loads[key] = cached
        return cached

    def mass_matvec(self, coefficients: np.ndarray) -> np.ndarray:
        return self.reduced_mass @ coefficients

    def stiffness_matvec(self, coefficients: np.ndarray) -> np.ndarray:
        return self.reduced_stiffness @ coefficients

    def mass_norm(self, coefficients: np.ndarray) -> float:
        return float(np.sqrt(max(coefficients @ self.reduced_mass @ coefficients, 0.0)))

    def clear_caches(self) -> None:
        with self._lock:
            self._factors.clear()
            self._loads.clear()


def assemble_multiscale_space(grid: TwoLevelGrid, kappa: CoefficientField, level: int, mass: SparseOperator,
                              stiffness: SparseOperator, threads: Optional[int] = None,
                              include_boundary_nodes: bool = False) -> MultiscaleSpace:
    """
    Build Phi, drop near-dependent columns and form the reduced operators.

    Raises:
        AlignmentError: If 2^level does not divide the fine segments of some side.
        ProjectionError: If no column survives.
    """
    kappa.check_grid(grid)
    if mass.dimension != grid.n_dofs or stiffness.dimension != grid.n_dofs:
        raise MeshError("fine operators do not match the grid", {"dofs": grid.n_dofs})
    started = time.perf_counter()

    pou = build_pou(grid, kappa)
    kappa_tilde = build_weighted_kappa(grid, kappa, pou)
    neighborhoods = grid.neighborhoods if include_boundary_nodes else grid.interior_neighborhoods()
    local_bases = parallel_map(
        lambda nb: build_local_basis(grid, kappa, level, pou, kappa_tilde, nb), neighborhoods, threads
    )

    rows, cols, vals, tags = [], [], [], []
    skipped = []
    for local_basis in local_bases:
        block, block_tags = local_basis.columns()
        if local_basis.source is None:
            skipped.append(local_basis.neighborhood.node)
        dofs = grid.dof_of_node[local_basis.neighborhood.patch.node_ids]
        inside = dofs >= 0
        local_rows, local_cols = np.nonzero(block[inside])
        rows.append(dofs[inside][local_rows])
        cols.append(local_cols + len(tags))
        vals.append(block[inside][local_rows, local_cols])
        tags.extend(block_tags)
    if not tags:
        raise ProjectionError("multiscale space is empty", {"level": level})

    full = sps.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.n_dofs, len(tags))
    )
    kept = _independent_columns(gram_matrix(full, mass))
    if kept.size == 0:
        raise ProjectionError("every multiscale column was dropped", {"candidates": len(tags)})
    kept_set = set(kept.tolist())
    dropped = tuple(tag for j, tag in enumerate(tags) if j not in kept_set)
    basis = full[:, kept]
    kept_gram = gram_matrix(basis, mass)
    transform = orthonormalizing_transform(kept_gram)

    space = MultiscaleSpace(
        grid=grid,
        kappa=kappa,
        level=level,
        basis=basis,
        transform=transform,
        reduced_mass=_congruence(transform, kept_gram),
        reduced_stiffness=_congruence(transform, gram_matrix(basis, stiffness)),
        pou=pou,
        kappa_tilde=kappa_tilde,
        columns=tuple(tags[j] for j in kept),
        dropped=dropped,
        skipped=tuple(skipped),
        local_bases=tuple(local_bases),
        mass_op=mass,
        stiffness_op=stiffness,
    )
    if dropped:
        logger.warning(f"Dropped {len(dropped)} of {len(tags)} near-dependent multiscale columns")
    if skipped:
        logger.warning(f"Skipped the source function on {len(skipped)} neighborhoods with vanishing kappa_tilde")
    logger.info(
        f"Multiscale space level {level}: {space.dimension} columns over {len(local_bases)} neighborhoods "
        f"in {time.perf_counter() - started:.2f}s"
    )
    return space


def local_trace_projection(local_basis: LocalBasis, fine_full: np.ndarray) -> np.ndarray:
    """P_{i,level}(v) on omega_i: Haar coefficients of the trace, extended harmonically."""
    out = np.zeros(local_basis.neighborhood.patch.n_nodes)
    for basis, ext in zip(local_basis.bases, local_basis.extensions):
        coefficients = edge_inner_products(basis, fine_full[basis.edge.node_ids])
        out += ext @ coefficients
    return out


def trace_projection_Pl(space: MultiscaleSpace, fine: np.ndarray) -> np.ndarray:
    """
    P_level(v) = sum_i chi_i P_{i,level}(v) over the neighborhoods of the space.

    Args:
        fine: interior-dof values of v.

    Returns:
        Interior-dof values of P_level(v).
    """
    grid = space.grid
    fine_full = grid.to_full(fine)
    total = np.zeros(grid.n_nodes)
    for local_basis in space.local_bases:
        contribution = local_basis.chi * local_trace_projection(local_basis, fine_full)
        np.add.at(total, local_basis.neighborhood.patch.node_ids, contribution)
    return grid.to_dofs(total)


def projection_errors(space: MultiscaleSpace, fine: np.ndarray) -> Dict[str, float]:
    """L2 and energy norms of v - P_level(v)."""
    residual = fine - trace_projection_Pl(space, fine)
    return {
        "l2_error": float(np.sqrt(max(space.mass_op.quadratic(residual), 0.0))),
        "energy_error": float(np.sqrt(max(space.stiffness_op.quadratic(residual), 0.0))),
    }


def pou_node_grids(space: MultiscaleSpace, nodes: Optional[Sequence[Tuple[int, int]]] = None) -> Dict[Tuple[int, int], np.ndarray]:
    """chi_i as (n+1) x (n+1) row-major grids for the requested coarse nodes (default: all)."""
    grid = space.grid
    nodes = list(nodes) if nodes is not None else list(grid.coarse_nodes)
    out = {}
    for I, J in nodes:
        index = J * (grid.coarse_cells + 1) + I
        out[(I, J)] = space.pou.values(index).reshape(grid.n + 1, grid.n + 1)
    return out


def export_pou(space: MultiscaleSpace, directory, nodes: Optional[Sequence[Tuple[int, int]]] = None) -> List[Path]:
    """Write chi_i as chi_<I>_<J>.txt node grids; returns the paths written."""
    directory = Path(directory)
    paths = [
        write_node_grid(directory / f"chi_{I}_{J}.txt", values)
        for (I, J), values in pou_node_grids(space, nodes).items()
    ]
    logger.debug(f"Exported {len(paths)} partition of unity functions to {directory}")
    return paths
