# wemp/services/experiment.py
import contextlib
import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from wemp.configs.presets import problem_for
from wemp.exceptions import AlignmentError, MeshError
from wemp.models.experiment import ExperimentConfig
from wemp.services.coefficient import CoefficientField, field_from_spec, save_field
from wemp.services.fem import SparseOperator, assemble_mass, assemble_stiffness, solve_elliptic
from wemp.services.grid import TwoLevelGrid, build_grid, grid_summary
from wemp.services.multiscale import MultiscaleSpace, assemble_multiscale_space, export_pou, projection_errors
from wemp.services.parareal import PararealReport, run_parareal
from wemp.services.time_integration import fine_reference_solve, multiscale_sequential_solve
from wemp.utils.file_utils import create_run_manifest, export_coordinate, read_csv, write_csv, write_node_grid
from wemp.utils.helpers import generate_run_id, integer_ratio

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"


@dataclass(frozen=True)
class ErrorEntry:
    """Percentage errors; None where the reference norm vanishes."""

    l2: Optional[float]
    energy: Optional[float]


def _relative(operator: SparseOperator, reference: np.ndarray, candidate: np.ndarray) -> Optional[float]:
    denominator = operator.quadratic(reference)
    if denominator <= 0.0:
        return None
    return 100.0 * math.sqrt(max(operator.quadratic(reference - candidate), 0.0) / denominator)


def relative_errors(reference: np.ndarray, candidate: np.ndarray, mass: SparseOperator,
                    stiffness: SparseOperator) -> ErrorEntry:
    """
    100 |u_ref - u| / |u_ref| in the L2 and energy norms, for fine interior-dof vectors.

    Raises:
        MeshError: If the vectors do not match the operators.
    """
    if reference.shape != candidate.shape or reference.shape[0] != mass.dimension:
        raise MeshError("reference and candidate must be fine-dof vectors of the same mesh",
                        {"reference": reference.shape, "candidate": candidate.shape})
    entry = ErrorEntry(l2=_relative(mass, reference, candidate), energy=_relative(stiffness, reference, candidate))
    if entry.l2 is None:
        logger.warning("Reference solution vanishes; relative error undefined")
    return entry


_TIME_HEADER = re.compile(r"T\[(\w+)\]")


def _format(value: float) -> str:
    return UNDEFINED if value is None or np.isnan(value) else repr(float(value))


def _parse(token: str) -> float:
    return np.nan if token == UNDEFINED else float(token)


@dataclass
class ErrorTable:
    """Rows T^n, columns Rel_EW, Rel_0, ... as percentages; NaN marks an undefined entry."""

    norm: str
    times: List[float]
    columns: List[str]
    values: np.ndarray  # (len(times), len(columns))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def to_csv(self, path) -> Path:
        """The time column is headed T[<norm>]; read_csv recovers the norm from it."""
        rows = [[repr(float(t))] + [_format(v) for v in row] for t, row in zip(self.times, self.values)]
        return write_csv(path, [f"T[{self.norm}]"] + self.columns, rows)

    @classmethod
    def read_csv(cls, path, norm: str = "l2") -> "ErrorTable":
        """`norm` is used only when the header carries no label."""
        records = read_csv(path)
        if not records:
            return cls(norm=norm, times=[], columns=[], values=np.zeros((0, 0)))
        time_column, *columns = list(records[0])
        labelled = _TIME_HEADER.fullmatch(time_column)
        if labelled:
            norm = labelled.group(1)
        values = np.array([[_parse(record[name]) for name in columns] for record in records])
        return cls(norm=norm, times=[float(record[time_column]) for record in records], columns=columns, values=values)


def build_error_tables(times: Sequence[float], reference: np.ndarray, sequential: np.ndarray,
                       iterates: Sequence[np.ndarray], mass: SparseOperator,
                       stiffness: SparseOperator) -> Dict[str, ErrorTable]:
    """
    Args:
        times: coarse points T^1..T^M of the rows.
        reference, sequential: (M, fine dofs) states at those points.
        iterates: parareal iterates reconstructed to fine dofs, each (M, fine dofs).
    """
    candidates = [sequential] + list(iterates)
    columns = ["Rel_EW"] + [f"Rel_{k}" for k in range(len(iterates))]
    l2 = np.full((len(times), len(columns)), np.nan)
    energy = np.full_like(l2, np.nan)
    for n in range(len(times)):
        for c, candidate in enumerate(candidates):
            entry = relative_errors(reference[n], candidate[n], mass, stiffness)
            l2[n, c] = np.nan if entry.l2 is None else entry.l2
            energy[n, c] = np.nan if entry.energy is None else entry.energy
    return {
        "l2": ErrorTable("l2", list(times), columns, l2),
        "energy": ErrorTable("energy", list(times), list(columns), energy),
    }


@dataclass
class ExperimentOutcome:
    run_dir: Path
    stages: Dict[str, Dict]
    tables: Dict[str, ErrorTable] = field(default_factory=dict)
    report: Optional[PararealReport] = None
    space: Optional[MultiscaleSpace] = None
    manifest: Dict = field(default_factory=dict)


@contextlib.contextmanager
def _stage(stages: Dict[str, Dict], name: str) -> Iterator[None]:
    started = time.perf_counter()
    stages[name] = {"status": "running"}
    try:
        yield
    except Exception as e:
        stages[name] = {"status": "failed", "seconds": time.perf_counter() - started, "error": str(e)}
        logger.error(f"Stage '{name}' failed: {e}")
        raise
    stages[name] = {"status": "ok", "seconds": time.perf_counter() - started}
    logger.info(f"Stage '{name}' finished in {stages[name]['seconds']:.2f}s")


@contextlib.contextmanager
def _run_log(run_dir: Path) -> Iterator[None]:
    package_logger = logging.getLogger("wemp")
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    package_logger.addHandler(handler)
    if package_logger.level == logging.NOTSET:
        package_logger.setLevel(logging.DEBUG)
    try:
        yield
    finally:
        package_logger.removeHandler(handler)
        handler.close()


def _write_snapshots(run_dir: Path, cfg: ExperimentConfig, grid: TwoLevelGrid, reference: np.ndarray,
                     sequential: np.ndarray, iterates: Sequence[np.ndarray]) -> None:
    """States are indexed by coarse point n = 0..M."""
    directory = run_dir / "snapshots"
    for t in cfg.resolved_snapshot_times():
        n = integer_ratio(t, cfg.coarse_step, "snapshot time / coarse_step")
        label = f"t{t:g}"
        write_node_grid(directory / f"reference_{label}.txt", grid.as_node_grid(reference[n]))
        write_node_grid(directory / f"multiscale_{label}.txt", grid.as_node_grid(sequential[n]))
        for k in cfg.snapshot_iterations:
            if k < len(iterates):
                write_node_grid(directory / f"parareal_k{k}_{label}.txt", grid.as_node_grid(iterates[k][n]))


def run_experiment(cfg: ExperimentConfig) -> ExperimentOutcome:
    """
    Reference, multiscale and parareal solutions of one experiment, with
    error tables, convergence history, snapshots and a run manifest written
    to cfg.output_dir.

    A failing stage is recorded in the manifest, files already written are
    kept and the error is re-raised.
    """
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    outcome = ExperimentOutcome(run_dir=run_dir, stages={})
    stages = outcome.stages
    extra: Dict = {"run_id": generate_run_id(), "seed": cfg.seed}
    time_grid = cfg.time_grid()
    M, q = time_grid.n_coarse, time_grid.ratio
    workers = cfg.resolved_threads()

    with _run_log(run_dir):
        logger.info(f"Experiment '{cfg.name}': M={M}, q={q}, level={cfg.level}, workers={workers}")
        try:
            with _stage(stages, "setup"):
                grid = build_grid(cfg.coarse_cells, cfg.refinement)
                kappa = field_from_spec(grid, cfg.coefficient)
                save_field(run_dir / "coefficient.txt", kappa)
                mass = assemble_mass(grid)
                stiffness = assemble_stiffness(grid, kappa)
                data = problem_for(cfg)
                extra["grid"] = grid_summary(grid)
                extra["contrast"] = kappa.contrast

            with _stage(stages, "reference"):
                ref_per_coarse = integer_ratio(cfg.coarse_step, cfg.reference_step, "coarse_step / reference_step")
                reference = fine_reference_solve(
                    grid, kappa, data, cfg.reference_step, cfg.reference_scheme_config(), cfg.solver,
                    record_every=ref_per_coarse, mass=mass, stiffness=stiffness,
                ).states

            with _stage(stages, "space"):
                space = assemble_multiscale_space(grid, kappa, cfg.level, mass, stiffness, workers,
                                                  cfg.include_boundary_nodes)
                outcome.space = space
                extra["space"] = {
                    "dimension": space.dimension,
                    "dropped_columns": len(space.dropped),
                    "skipped_source_functions": [list(node) for node in space.skipped],
                }

            if cfg.export_operators:
                with _stage(stages, "exports"):
                    exports = run_dir / "exports"
                    export_coordinate(exports / "basis.txt", space.basis)
                    export_coordinate(exports / "transform.txt", space.transform)
                    export_coordinate(exports / "mass.txt", mass.matrix)
                    export_coordinate(exports / "stiffness.txt", stiffness.matrix)
                    export_pou(space, exports / "pou")

            with _stage(stages, "sequential"):
                sequential = multiscale_sequential_solve(space, data, cfg.fine_step, cfg.scheme_config(),
                                                         record_every=q)
                sequential_fine = space.reconstruct(sequential.states)

            with _stage(stages, "parareal"):
                result = run_parareal(
                    space, data, time_grid, cfg.scheme_config(), cfg.tolerance, cfg.resolved_kmax(), workers,
                    cfg.stopping_norm, reference=reference,
                )
                outcome.report = result.report
                iterates_fine = [space.reconstruct(U) for U in result.iterates]
                extra["parareal"] = {
                    "iterations": result.report.iterations,
                    "converged": result.report.converged,
                    "errors": result.report.errors,
                    "coarse_solves": result.report.coarse_solves,
                    "fine_solves": result.report.fine_solves,
                    "estimated_parallel_seconds": result.report.estimated_parallel_seconds,
                    "workers": workers,
                    "stopping_norm": f"{cfg.stopping_norm} norm of multiscale coefficient differences",
                }

            with _stage(stages, "tables"):
                shown = iterates_fine[: cfg.table_iterations + 1]
                outcome.tables = build_error_tables(
                    time_grid.coarse_times()[1:], reference[1:], sequential_fine[1:], [U[1:] for U in shown],
                    mass, stiffness,
                )
                outcome.tables["l2"].to_csv(run_dir / "errors_l2.csv")
                outcome.tables["energy"].to_csv(run_dir / "errors_energy.csv")
                history = result.report.history_rows()
                write_csv(run_dir / "convergence_history.csv", ["k", "err", "wall_coarse_ms", "wall_fine_ms"],
                          [[row["k"], row["err"], row["wall_coarse_ms"], row["wall_fine_ms"]] for row in history])

            with _stage(stages, "snapshots"):
                _write_snapshots(run_dir, cfg, grid, reference, sequential_fine, iterates_fine)
        finally:
            if outcome.space is not None:
                outcome.space.clear_caches()
            outcome.manifest = create_run_manifest(run_dir, cfg.model_dump(mode="json"), stages, extra)
    return outcome


def projection_study(pairs: Sequence[Tuple[int, int]], levels: Sequence[int],
                     field_factory: Callable[[TwoLevelGrid], CoefficientField], output_dir=None,
                     threads: Optional[int] = None) -> List[Dict]:
    """
    L2 error of v - P_level(v) for v the fine solution of -div(kappa grad v) = 1.

    Levels that do not fit the edges of a grid are skipped with a warning.
    Rows are written to <output_dir>/projection_study.csv when output_dir is given.
    """
    rows = []
    for coarse_cells, refinement in pairs:
        grid = build_grid(coarse_cells, refinement)
        kappa = field_factory(grid)
        mass, stiffness = assemble_mass(grid), assemble_stiffness(grid, kappa)
        v = solve_elliptic(grid, stiffness)
        for level in levels:
            try:
                space = assemble_multiscale_space(grid, kappa, level, mass, stiffness, threads)
            except AlignmentError as e:
                logger.warning(f"Skipping level {level} on Nc={coarse_cells}, r={refinement}: {e}")
                continue
            error = projection_errors(space, v)["l2_error"]
            logger.info(f"Projection study Nc={coarse_cells} r={refinement} level={level}: {error:.3e}")
            rows.append({"Nc": coarse_cells, "r": refinement, "H": grid.H, "level": level, "l2_error": error})

    if output_dir is not None:
        write_csv(Path(output_dir) / "projection_study.csv", ["Nc", "r", "H", "level", "l2_error"],
                  [[row["Nc"], row["r"], repr(row["H"]), row["level"], repr(row["l2_error"])] for row in rows])
    return rows
