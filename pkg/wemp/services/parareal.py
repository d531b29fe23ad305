# wemp/services/parareal.py
"""
Parareal iteration on the multiscale space.

Iterate k holds U_k^n at every coarse point T^n together with the coarse
propagations E(T^n, U_k^n) computed while it was built, so every jump
S(T^n, U_k^n) = F(T^n, U_k^n) - E(T^n, U_k^n) costs one fine propagation only.
Fine propagations run in a thread pool; the correction sweep is sequential.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np

from wemp.exceptions import PropagationError, WempError
from wemp.models.problem import ProblemData, TimeGrid
from wemp.models.solver import SchemeConfig
from wemp.services.multiscale import MultiscaleSpace
from wemp.services.time_integration import coarse_propagate, fine_propagate
from wemp.utils.helpers import parallel_map

logger = logging.getLogger(__name__)

StoppingNorm = Literal["euclidean", "mass"]


@dataclass
class PhaseTimes:
    """Wall seconds of one iteration; fine_critical is the slowest single interval."""

    coarse: float = 0.0
    fine: float = 0.0
    correction: float = 0.0
    fine_critical: float = 0.0


@dataclass
class PararealState:
    iteration: int
    trajectory: np.ndarray  # (M + 1, dim)
    coarse: np.ndarray  # (M, dim), E(T^n, U_k^n)
    fine: Optional[np.ndarray] = None  # (M, dim), filled when iterate k + 1 is built
    history: List[float] = field(default_factory=list)
    tolerance: float = 0.0
    kmax: int = 0
    timings: PhaseTimes = field(default_factory=PhaseTimes)

    @property
    def n_intervals(self) -> int:
        return self.coarse.shape[0]


def initial_coarse_sweep(space: MultiscaleSpace, data: ProblemData, time_grid: TimeGrid,
                         initial: Optional[np.ndarray] = None) -> PararealState:
    """U_0 from the projected u0 by repeated coarse backward Euler steps."""
    started = time.perf_counter()
    M = time_grid.n_coarse
    U0 = space.project_initial(data.initial) if initial is None else np.asarray(initial, dtype=float)
    trajectory = np.empty((M + 1, space.dimension))
    coarse = np.empty((M, space.dimension))
    trajectory[0] = U0
    for n in range(M):
        try:
            coarse[n] = coarse_propagate(space, trajectory[n], time_grid.coarse_time(n), time_grid.coarse_step,
                                         data.source)
        except WempError as e:
            raise PropagationError(f"coarse propagation failed: {e.detail}", {**e.context, "interval": n})
        trajectory[n + 1] = coarse[n]
    elapsed = time.perf_counter() - started
    logger.debug(f"Initial coarse sweep over {M} intervals in {elapsed * 1e3:.1f}ms")
    return PararealState(iteration=0, trajectory=trajectory, coarse=coarse, timings=PhaseTimes(coarse=elapsed))


def _timed_fine(space: MultiscaleSpace, data: ProblemData, time_grid: TimeGrid, scheme: SchemeConfig,
                U: np.ndarray, n: int) -> Tuple[np.ndarray, float]:
    started = time.perf_counter()
    try:
        result = fine_propagate(space, U, time_grid.coarse_time(n), time_grid.coarse_step, time_grid.fine_step,
                                scheme, data.source)
    except WempError as e:
        raise PropagationError(f"fine propagation failed: {e.detail}", {**e.context, "interval": n})
    return result, time.perf_counter() - started


def parareal_iterate(state: PararealState, space: MultiscaleSpace, data: ProblemData, time_grid: TimeGrid,
                     scheme: SchemeConfig, workers: Optional[int] = None) -> PararealState:
    """
    Build iterate k + 1 from iterate k.

    Fine propagations of all U_k^n run in parallel and are stored on `state`;
    the correction U_{k+1}^{n+1} = S(T^n, U_k^n) + E(T^n, U_{k+1}^n) follows
    sequentially from U_{k+1}^0 = U_k^0.

    Raises:
        PropagationError: If any interval fails; the interval index is attached.
    """
    M = state.n_intervals
    started = time.perf_counter()
    results = parallel_map(
        lambda n: _timed_fine(space, data, time_grid, scheme, state.trajectory[n], n), range(M), workers
    )
    fine_elapsed = time.perf_counter() - started
    fine = np.vstack([result for result, _ in results])
    state.fine = fine
    jumps = fine - state.coarse

    started = time.perf_counter()
    trajectory = np.empty_like(state.trajectory)
    coarse = np.empty_like(state.coarse)
    trajectory[0] = state.trajectory[0]
    for n in range(M):
        try:
            coarse[n] = coarse_propagate(space, trajectory[n], time_grid.coarse_time(n), time_grid.coarse_step,
                                         data.source)
        except WempError as e:
            raise PropagationError(f"coarse propagation failed: {e.detail}", {**e.context, "interval": n})
        trajectory[n + 1] = jumps[n] + coarse[n]
    correction_elapsed = time.perf_counter() - started

    return PararealState(
        iteration=state.iteration + 1,
        trajectory=trajectory,
        coarse=coarse,
        history=list(state.history),
        tolerance=state.tolerance,
        kmax=state.kmax,
        timings=PhaseTimes(
            fine=fine_elapsed,
            correction=correction_elapsed,
            fine_critical=max((elapsed for _, elapsed in results), default=0.0),
        ),
    )


def stopping_error(previous: np.ndarray, current: np.ndarray, norm: StoppingNorm = "euclidean",
                   mass: Optional[np.ndarray] = None) -> float:
    """
    Mean over n = 1..M of |U_{k+1}^n - U_k^n|.

    Args:
        norm: "euclidean" on the coefficients, or "mass" for the reduced mass
            matrix weighting (requires `mass`).

    Raises:
        ValueError: If the trajectories differ in shape.
    """
    previous, current = np.asarray(previous), np.asarray(current)
    if previous.shape != current.shape:
        raise ValueError(f"trajectory shapes differ: {previous.shape} vs {current.shape}")
    if previous.shape[0] < 2:
        return 0.0
    diff = current[1:] - previous[1:]
    if norm == "mass":
        if mass is None:
            raise ValueError("mass-weighted stopping error needs the reduced mass matrix")
        norms = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", diff, mass, diff), 0.0))
    else:
        norms = np.linalg.norm(diff, axis=1)
    return float(np.mean(norms))


@dataclass
class PararealReport:
    iterations: int
    converged: bool
    errors: List[float]
    phases: List[PhaseTimes]
    coarse_solves: int
    fine_solves: int
    estimated_parallel_seconds: float
    workers: int
    stopping_norm: str
    relative_errors: List[np.ndarray] = field(default_factory=list)

    def history_rows(self) -> List[dict]:
        """One row per iterate; k = 0 is the initial coarse sweep and has no err."""
        rows = []
        for k, phase in enumerate(self.phases):
            rows.append({
                "k": k,
                "err": "" if k == 0 else repr(self.errors[k - 1]),
                "wall_coarse_ms": repr((phase.coarse + phase.correction) * 1e3),
                "wall_fine_ms": repr(phase.fine * 1e3),
            })
        return rows


@dataclass
class PararealResult:
    report: PararealReport
    trajectory: np.ndarray
    iterates: List[np.ndarray]


def _relative_l2(space: MultiscaleSpace, reference: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
    out = np.full(trajectory.shape[0], np.nan)
    fine = space.reconstruct(trajectory)
    for n in range(trajectory.shape[0]):
        denominator = space.mass_op.quadratic(reference[n])
        if denominator > 0.0:
            out[n] = 100.0 * np.sqrt(space.mass_op.quadratic(reference[n] - fine[n]) / denominator)
    return out


def run_parareal(space: MultiscaleSpace, data: ProblemData, time_grid: TimeGrid, scheme: SchemeConfig,
                 tolerance: float, kmax: Optional[int] = None, workers: Optional[int] = None,
                 stopping_norm: StoppingNorm = "euclidean", reference: Optional[np.ndarray] = None,
                 initial: Optional[np.ndarray] = None) -> PararealResult:
    """
    Iterate while err > tolerance and k < kmax, starting from err = 1.

    Args:
        kmax: iteration cap, default the number of coarse intervals.
        reference: optional (M + 1, fine dofs) states at the coarse points for
            per-iterate relative L2 errors.

    Returns:
        The final trajectory, every iterate and the report. Hitting kmax is
        logged, not raised.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    M = time_grid.n_coarse
    kmax = M if kmax is None else kmax
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    workers = workers or 1

    state = initial_coarse_sweep(space, data, time_grid, initial)
    state.tolerance, state.kmax = tolerance, kmax
    iterates = [state.trajectory]
    phases = [state.timings]
    err = 1.0
    while err > tolerance and state.iteration < kmax:
        new_state = parareal_iterate(state, space, data, time_grid, scheme, workers)
        mass = space.reduced_mass if stopping_norm == "mass" else None
        err = stopping_error(state.trajectory, new_state.trajectory, stopping_norm, mass)
        new_state.history.append(err)
        logger.info(f"Parareal iteration {new_state.iteration}: err = {err:.3e}")
        state = new_state
        iterates.append(state.trajectory)
        phases.append(state.timings)

    converged = err <= tolerance
    if not converged:
        logger.warning(f"Parareal stopped at kmax = {kmax} with err = {err:.3e} > {tolerance:g}")

    k = state.iteration
    report = PararealReport(
        iterations=k,
        converged=converged,
        errors=list(state.history),
        phases=phases,
        coarse_solves=M * (k + 1),
        fine_solves=k * M * time_grid.ratio,
        estimated_parallel_seconds=sum(p.coarse + p.correction + p.fine_critical for p in phases),
        workers=workers,
        stopping_norm=stopping_norm,
        relative_errors=[_relative_l2(space, reference, U) for U in iterates] if reference is not None else [],
    )
    return PararealResult(report=report, trajectory=state.trajectory, iterates=iterates)
