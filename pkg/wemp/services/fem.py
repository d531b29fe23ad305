# wemp/services/fem.py
"""
Bilinear (Q1) finite elements on the fine mesh.

Element matrices are integrated with 2x2 Gauss points, which is exact for Q1
stiffness and mass on rectangles with cell-constant coefficients.
"""
import logging
import threading
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg as la
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, cg, splu

from wemp.exceptions import MeshError, ProjectionError, SolverError
from wemp.models.problem import SourceTerm
from wemp.models.solver import LinearSolveConfig, SolverMethod
from wemp.services.coefficient import CoefficientField
from wemp.services.grid import TwoLevelGrid

logger = logging.getLogger(__name__)

_GAUSS_POINTS = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)

Matrix = Union[np.ndarray, sps.spmatrix]


def _shape_functions(xi: float, eta: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q1 shape values and reference derivatives, corners counterclockwise from (0, 0)."""
    values = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    d_xi = np.array([-(1 - eta), 1 - eta, eta, -eta])
    d_eta = np.array([-(1 - xi), -xi, xi, 1 - xi])
    return values, d_xi, d_eta


def element_matrices(hx: float, hy: float) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-coefficient Q1 stiffness and mass matrices of an hx x hy cell."""
    stiffness = np.zeros((4, 4))
    mass = np.zeros((4, 4))
    weight = 0.25 * hx * hy
    for xi in _GAUSS_POINTS:
        for eta in _GAUSS_POINTS:
            values, d_xi, d_eta = _shape_functions(xi, eta)
            dx, dy = d_xi / hx, d_eta / hy
            stiffness += weight * (np.outer(dx, dx) + np.outer(dy, dy))
            mass += weight * np.outer(values, values)
    return stiffness, mass


def cell_gradient_energy(nodal: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """
    Gauss-averaged |grad u|^2 on every cell of a Q1 field.

    Args:
        nodal: (ny + 1, nx + 1) nodal values, row iy, column ix.

    Returns:
        (ny, nx) array of cell averages.
    """
    u00, u10 = nodal[:-1, :-1], nodal[:-1, 1:]
    u01, u11 = nodal[1:, :-1], nodal[1:, 1:]
    energy = np.zeros(u00.shape)
    for xi in _GAUSS_POINTS:
        for eta in _GAUSS_POINTS:
            gx = ((u10 - u00) * (1 - eta) + (u11 - u01) * eta) / hx
            gy = ((u01 - u00) * (1 - xi) + (u11 - u10) * xi) / hy
            energy += 0.25 * (gx ** 2 + gy ** 2)
    return energy


def assemble_patch(nx: int, ny: int, element: np.ndarray, weights: np.ndarray) -> sps.csr_matrix:
    """Assemble weights[c] * element over an nx x ny block of cells, local row-major nodes."""
    cx, cy = np.meshgrid(np.arange(nx), np.arange(ny))
    base = (cy * (nx + 1) + cx).ravel()
    conn = np.stack([base, base + 1, base + nx + 2, base + nx + 1], axis=1)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    data = (np.asarray(weights, dtype=float)[:, None, None] * element[None, :, :]).ravel()
    size = (nx + 1) * (ny + 1)
    return sps.coo_matrix((data, (rows, cols)), shape=(size, size)).tocsr()


class SparseOperator:
    """
    Symmetric sparse matrix with a lazily cached direct factorization.

    The factorization is created once under a lock and then only read.
    """

    def __init__(self, matrix: sps.spmatrix, name: str = "operator"):
        self.matrix = sps.csr_matrix(matrix)
        self.name = name
        self._factor = None
        self._lock = threading.Lock()

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, other):
        return self.matrix @ other

    def quadratic(self, v: np.ndarray) -> float:
        return float(v @ (self.matrix @ v))

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def asymmetry(self) -> float:
        """max |a_ij - a_ji| relative to max |a|."""
        diff = abs(self.matrix - self.matrix.T)
        scale = abs(self.matrix).max()
        return float(diff.max() / scale) if scale else 0.0

    def factorization(self):
        if self._factor is None:
            with self._lock:
                if self._factor is None:
                    try:
                        self._factor = splu(self.matrix.tocsc())
                    except RuntimeError as e:
                        raise SolverError(f"factorization of {self.name} failed: {e}", {"dimension": self.dimension})
        return self._factor

    def shifted(self, other: "SparseOperator", shift: float, name: Optional[str] = None) -> "SparseOperator":
        """self + shift * other."""
        return SparseOperator(self.matrix + shift * other.matrix, name or f"{self.name}+{shift:g}*{other.name}")


def _check_mesh(grid: TwoLevelGrid, kappa: Optional[CoefficientField]) -> None:
    if kappa is not None:
        kappa.check_grid(grid)


def _restrict(grid: TwoLevelGrid, full: sps.csr_matrix) -> sps.csr_matrix:
    interior = grid.interior_nodes
    return full[interior][:, interior].tocsr()


def assemble_stiffness(grid: TwoLevelGrid, kappa: CoefficientField, dirichlet: bool = True) -> SparseOperator:
    """
    Stiffness matrix of a(v, w) = int kappa grad v . grad w.

    With dirichlet=True boundary rows and columns are eliminated, leaving the
    interior-dof operator; otherwise the full nodal matrix is returned.
    """
    _check_mesh(grid, kappa)
    element, _ = element_matrices(grid.h, grid.h)
    full = assemble_patch(grid.n, grid.n, element, kappa.values)
    if not dirichlet:
        return SparseOperator(full, "stiffness(full)")
    return SparseOperator(_restrict(grid, full), "stiffness")


def assemble_mass(grid: TwoLevelGrid, dirichlet: bool = True) -> SparseOperator:
    _, element = element_matrices(grid.h, grid.h)
    full = assemble_patch(grid.n, grid.n, element, np.ones(grid.n_cells))
    if not dirichlet:
        return SparseOperator(full, "mass(full)")
    return SparseOperator(_restrict(grid, full), "mass")


class LoadAssembler:
    """
    Load vectors F(t)_i = int f(., t) phi_i for interior basis functions.

    f is interpolated at all fine nodes and integrated with the Q1 mass matrix.
    """

    def __init__(self, grid: TwoLevelGrid):
        self.grid = grid
        full = assemble_mass(grid, dirichlet=False).matrix
        self._rows = full[grid.interior_nodes].tocsr()

    def __call__(self, source: Optional[SourceTerm], t: float) -> np.ndarray:
        if source is None:
            return np.zeros(self.grid.n_dofs)
        values = np.broadcast_to(
            np.asarray(source(self.grid.node_x, self.grid.node_y, t), dtype=float), self.grid.node_x.shape
        )
        return self._rows @ values


def solve(op: SparseOperator, rhs: np.ndarray, cfg: Optional[LinearSolveConfig] = None) -> np.ndarray:
    """
    Solve op x = rhs.

    Raises:
        SolverError: If rhs is not finite, the factorization is singular or CG
            does not reach ||op x - rhs|| <= tol ||rhs||.
    """
    cfg = cfg or LinearSolveConfig()
    rhs = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(rhs)):
        raise SolverError(f"non-finite right-hand side for {op.name}")
    if not np.any(rhs):
        return np.zeros_like(rhs)

    if cfg.method is SolverMethod.DIRECT:
        x = op.factorization().solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"singular factorization of {op.name}")
        return x

    diagonal = op.diagonal()
    if np.any(diagonal <= 0):
        raise SolverError(f"{op.name} has a non-positive diagonal; CG needs an SPD operator")
    preconditioner = LinearOperator(op.matrix.shape, matvec=lambda r: r / diagonal)
    columns = rhs.reshape(rhs.shape[0], -1)
    out = np.empty_like(columns)
    for j in range(columns.shape[1]):
        x, info = cg(op.matrix, columns[:, j], rtol=cfg.tolerance, maxiter=cfg.max_iterations, M=preconditioner)
        if info != 0:
            residual = float(np.linalg.norm(op.matrix @ x - columns[:, j]))
            raise SolverError(f"CG did not converge for {op.name}", {"info": info, "residual": residual})
        out[:, j] = x
    return out.reshape(rhs.shape)


def energy_norm(stiffness: SparseOperator, v: np.ndarray) -> float:
    """sqrt(v^T A v), the kappa-weighted H1 seminorm of the fine function v."""
    if v.shape[0] != stiffness.dimension:
        raise MeshError("vector does not match operator", {"expected": stiffness.dimension, "got": v.shape[0]})
    return float(np.sqrt(max(stiffness.quadratic(v), 0.0)))


def l2_norm(mass: SparseOperator, v: np.ndarray) -> float:
    if v.shape[0] != mass.dimension:
        raise MeshError("vector does not match operator", {"expected": mass.dimension, "got": v.shape[0]})
    return float(np.sqrt(max(mass.quadratic(v), 0.0)))


def gram_matrix(columns: Matrix, mass: SparseOperator) -> np.ndarray:
    """Dense Phi^T M Phi, symmetrized."""
    product = columns.T @ (mass.matrix @ columns)
    if sps.issparse(product):
        product = product.toarray()
    product = np.asarray(product)
    return 0.5 * (product + product.T)


def l2_project_onto(columns: Matrix, mass: SparseOperator, v: np.ndarray, gram_factor=None) -> np.ndarray:
    """
    Coefficients c with (Phi^T M Phi) c = Phi^T M v.

    Raises:
        ProjectionError: If Phi^T M Phi is not positive definite (dependent columns).
    """
    rhs = columns.T @ (mass.matrix @ v)
    if gram_factor is None:
        try:
            gram_factor = la.cho_factor(gram_matrix(columns, mass))
        except la.LinAlgError as e:
            raise ProjectionError(f"Gram matrix is rank deficient: {e}", {"columns": columns.shape[1]})
    return la.cho_solve(gram_factor, np.asarray(rhs).ravel())


def solve_elliptic(grid: TwoLevelGrid, stiffness: SparseOperator, source: Optional[SourceTerm] = None,
                   cfg: Optional[LinearSolveConfig] = None) -> np.ndarray:
    """Fine solution of -div(kappa grad u) = f with u = 0 on the boundary; f = 1 by default."""
    source = source or (lambda x, y, t: np.ones_like(x))
    return solve(stiffness, LoadAssembler(grid)(source, 0.0), cfg)
