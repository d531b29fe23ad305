# wemp/services/time_integration.py
"""
Backward Euler and Crank-Nicolson stepping for M u' + A u = F(t).

The same stepping code drives the fine reference system on the interior fine
dofs and the reduced system on multiscale coefficients. Time points are always
computed as (global index) * step, so propagators that restart mid-trajectory
reproduce a sequential run exactly.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol

import numpy as np

from wemp.exceptions import SolverError
from wemp.models.problem import ProblemData, SourceTerm
from wemp.models.solver import BACKWARD_EULER, LinearSolveConfig, SchemeConfig
from wemp.services.coefficient import CoefficientField
from wemp.services.fem import LoadAssembler, SparseOperator, assemble_mass, assemble_stiffness, solve
from wemp.services.grid import TwoLevelGrid, check_zero_trace, nodal_interpolate
from wemp.services.multiscale import MultiscaleSpace
from wemp.utils.helpers import integer_ratio

logger = logging.getLogger(__name__)


class GalerkinSystem(Protocol):
    def mass_matvec(self, u: np.ndarray) -> np.ndarray: ...

    def stiffness_matvec(self, u: np.ndarray) -> np.ndarray: ...

    def shifted_solve(self, shift: float, rhs: np.ndarray) -> np.ndarray: ...

    def load(self, source: Optional[SourceTerm], t: float) -> np.ndarray: ...


class FineSystem:
    """Fine Q1 system on the interior dofs with one factorized M + shift*A per shift."""

    def __init__(self, grid: TwoLevelGrid, mass: SparseOperator, stiffness: SparseOperator,
                 solver: Optional[LinearSolveConfig] = None):
        self.grid = grid
        self.mass = mass
        self.stiffness = stiffness
        self.solver = solver or LinearSolveConfig()
        self._operators: Dict[float, SparseOperator] = {}
        self._lock = threading.Lock()
        self._loads = LoadAssembler(grid)

    def mass_matvec(self, u: np.ndarray) -> np.ndarray:
        return self.mass @ u

    def stiffness_matvec(self, u: np.ndarray) -> np.ndarray:
        return self.stiffness @ u

    def operator(self, shift: float) -> SparseOperator:
        key = float(shift)
        with self._lock:
            if key not in self._operators:
                self._operators[key] = self.mass.shifted(self.stiffness, key, name=f"M+{key:g}A")
            return self._operators[key]

    def shifted_solve(self, shift: float, rhs: np.ndarray) -> np.ndarray:
        return solve(self.operator(shift), rhs, self.solver)

    def load(self, source: Optional[SourceTerm], t: float) -> np.ndarray:
        return self._loads(source, t)


@dataclass
class Trajectory:
    """States recorded at global step indices; times[j] = indices[j] * step."""

    times: np.ndarray
    states: np.ndarray
    step: float
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def at_index(self, index: int) -> np.ndarray:
        hits = np.flatnonzero(self.indices == index)
        if hits.size == 0:
            raise KeyError(f"step {index} was not recorded")
        return self.states[hits[0]]

    def at_time(self, t: float) -> np.ndarray:
        return self.at_index(integer_ratio(t, self.step, "time / step"))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _step(system: GalerkinSystem, u: np.ndarray, m: int, dt: float, source: Optional[SourceTerm],
          scheme: SchemeConfig) -> np.ndarray:
    """One step t_m -> t_{m+1}, with m the global step index."""
    t_next = (m + 1) * dt
    if scheme.uses_backward_euler(m):
        rhs = system.mass_matvec(u)
        if source is not None:
            rhs = rhs + dt * system.load(source, t_next)
        return system.shifted_solve(dt, rhs)

    rhs = system.mass_matvec(u) - 0.5 * dt * system.stiffness_matvec(u)
    if source is not None:
        rhs = rhs + 0.5 * dt * (system.load(source, t_next) + system.load(source, m * dt))
    return system.shifted_solve(0.5 * dt, rhs)


def march(system: GalerkinSystem, u0: np.ndarray, start_index: int, n_steps: int, dt: float,
          source: Optional[SourceTerm], scheme: SchemeConfig, record_every: int = 1) -> Trajectory:
    """
    Take n_steps steps from global index start_index, recording the initial
    state, every record_every-th state and the final one.

    Raises:
        SolverError: If a step fails; the global step index is attached.
    """
    u = np.asarray(u0, dtype=float).copy()
    indices: List[int] = [start_index]
    states: List[np.ndarray] = [u.copy()]
    for j in range(n_steps):
        m = start_index + j
        try:
            u = _step(system, u, m, dt, source, scheme)
        except SolverError as e:
            raise SolverError(f"time step failed: {e.detail}", {**e.context, "step": m + 1})
        if not np.all(np.isfinite(u)):
            raise SolverError("time step produced non-finite values", {"step": m + 1})
        if (j + 1) % record_every == 0 or j + 1 == n_steps:
            indices.append(m + 1)
            states.append(u.copy())
    indices_array = np.asarray(indices)
    return Trajectory(times=indices_array * dt, states=np.vstack(states), step=dt, indices=indices_array)


def fine_reference_solve(grid: TwoLevelGrid, kappa: CoefficientField, data: ProblemData, fine_step: float,
                         scheme: SchemeConfig = BACKWARD_EULER, solver: Optional[LinearSolveConfig] = None,
                         record_every: int = 1, mass: Optional[SparseOperator] = None,
                         stiffness: Optional[SparseOperator] = None) -> Trajectory:
    """
    Fine Q1 trajectory on the interior dofs from the nodal interpolant of u0.

    Args:
        record_every: keep every record_every-th state (plus the first and last).

    Raises:
        ConfigurationError: If u0 does not vanish on the boundary of D.
    """
    n_steps = integer_ratio(data.final_time, fine_step, "final_time / fine_step")
    mass = mass or assemble_mass(grid)
    stiffness = stiffness or assemble_stiffness(grid, kappa)
    check_zero_trace(grid, data.initial)
    system = FineSystem(grid, mass, stiffness, solver)
    u0 = nodal_interpolate(grid, data.initial)
    logger.info(f"Fine reference: {n_steps} {scheme.scheme.value} steps of {fine_step:g} on {grid.n_dofs} dofs")
    return march(system, u0, 0, n_steps, fine_step, data.source, scheme, record_every)


def multiscale_sequential_solve(space: MultiscaleSpace, data: ProblemData, fine_step: float,
                                scheme: SchemeConfig = BACKWARD_EULER, record_every: int = 1,
                                initial: Optional[np.ndarray] = None) -> Trajectory:
    """Trajectory of multiscale coefficients; u0 is projected onto span(Phi) unless `initial` is given."""
    n_steps = integer_ratio(data.final_time, fine_step, "final_time / fine_step")
    u0 = space.project_initial(data.initial) if initial is None else initial
    return march(space, u0, 0, n_steps, fine_step, data.source, scheme, record_every)


def coarse_propagate(space: MultiscaleSpace, U: np.ndarray, start: float, coarse_step: float,
                     source: Optional[SourceTerm]) -> np.ndarray:
    """One backward Euler step of size coarse_step from T^n = start, load sampled at T^{n+1}."""
    n = int(round(start / coarse_step))
    return _step(space, U, n, coarse_step, source, BACKWARD_EULER)


def fine_propagate(space: MultiscaleSpace, U: np.ndarray, start: float, coarse_step: float, fine_step: float,
                   scheme: SchemeConfig, source: Optional[SourceTerm]) -> np.ndarray:
    """coarse_step / fine_step fine steps from T^n = start; no state is kept between calls."""
    q = integer_ratio(coarse_step, fine_step, "coarse_step / fine_step")
    m0 = int(round(start / fine_step))
    u = np.asarray(U, dtype=float)
    for m in range(m0, m0 + q):
        u = _step(space, u, m, fine_step, source, scheme)
    return u


def jump_operator(space: MultiscaleSpace, U: np.ndarray, start: float, coarse_step: float, fine_step: float,
                  scheme: SchemeConfig, source: Optional[SourceTerm]) -> np.ndarray:
    """S(T^n, U) = F(T^n, U) - E(T^n, U)."""
    fine = fine_propagate(space, U, start, coarse_step, fine_step, scheme, source)
    return fine - coarse_propagate(space, U, start, coarse_step, source)
