# wemp/models/experiment.py
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from wemp.configs import settings
from wemp.models.problem import TimeGrid
from wemp.models.solver import LinearSolveConfig, Scheme, SchemeConfig
from wemp.utils.helpers import integer_ratio


class InclusionSpec(BaseModel):
    """One inclusion of the permeability field: a rectangle (x0, y0, x1, y1) or a disc."""

    model_config = ConfigDict(frozen=True)

    shape: Literal["rectangle", "disc"]
    value: float = Field(ge=1.0)
    bounds: Optional[Tuple[float, float, float, float]] = None
    center: Optional[Tuple[float, float]] = None
    radius: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "InclusionSpec":
        if self.shape == "rectangle":
            if self.bounds is None:
                raise ValueError("rectangle inclusion needs bounds (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.bounds
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"empty rectangle {self.bounds}")
        elif self.center is None or self.radius is None:
            raise ValueError("disc inclusion needs center and radius")
        return self


class CoefficientSpec(BaseModel):
    """Where the permeability comes from."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["homogeneous", "inclusions", "file"] = "homogeneous"
    inclusions: List[InclusionSpec] = Field(default_factory=list)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_source(self) -> "CoefficientSpec":
        if self.kind == "file" and not self.path:
            raise ValueError("coefficient kind 'file' needs a path")
        if self.kind == "inclusions" and not self.inclusions:
            raise ValueError("coefficient kind 'inclusions' needs at least one inclusion")
        return self


class ExperimentConfig(BaseModel):
    """Fully resolved parameters of one experiment run."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    coarse_cells: int = Field(16, ge=2)
    refinement: int = Field(8, ge=2)
    level: int = Field(2, ge=0)
    final_time: float = Field(1.0, gt=0.0)
    coarse_step: float = Field(0.1, gt=0.0)
    fine_step: float = Field(1e-3, gt=0.0)
    reference_step: float = Field(1e-4, gt=0.0)
    scheme: Scheme = Scheme.BACKWARD_EULER
    startup_steps: int = Field(3, ge=0)
    reference_scheme: Scheme = Scheme.BACKWARD_EULER
    source: Literal["nonzero", "zero"] = "nonzero"
    coefficient: CoefficientSpec = Field(default_factory=CoefficientSpec)
    tolerance: float = Field(1e-8, gt=0.0)
    kmax: Optional[int] = Field(None, ge=1)
    table_iterations: int = Field(4, ge=0)
    snapshot_times: Optional[List[float]] = None
    snapshot_iterations: List[int] = Field(default_factory=lambda: [0, 1, 2])
    output_dir: str = settings.OUTPUT_DIR
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    stopping_norm: Literal["euclidean", "mass"] = "euclidean"
    include_boundary_nodes: bool = False
    export_operators: bool = False
    solver: LinearSolveConfig = Field(default_factory=LinearSolveConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        grid = self.time_grid()
        if self.reference_step > self.fine_step:
            raise ValueError("reference_step must not exceed fine_step")
        integer_ratio(self.coarse_step, self.reference_step, "coarse_step / reference_step")

        # interior neighborhoods have sides of 2r fine segments, boundary ones of r
        segments = self.refinement if self.include_boundary_nodes else 2 * self.refinement
        if segments % (2 ** self.level):
            raise ValueError(f"level {self.level} needs 2^level to divide {segments} fine segments per edge")

        for t in self.resolved_snapshot_times():
            if not 0.0 < t <= self.final_time:
                raise ValueError(f"snapshot time {t} outside (0, {self.final_time}]")
            integer_ratio(t, self.coarse_step, "snapshot time / coarse_step")
        if self.kmax is not None and self.kmax > grid.n_coarse:
            raise ValueError(f"kmax {self.kmax} exceeds the number of coarse intervals {grid.n_coarse}")
        return self

    def time_grid(self) -> TimeGrid:
        return TimeGrid(final_time=self.final_time, coarse_step=self.coarse_step, fine_step=self.fine_step)

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(scheme=self.scheme, startup_steps=self.startup_steps)

    def reference_scheme_config(self) -> SchemeConfig:
        return SchemeConfig(scheme=self.reference_scheme, startup_steps=self.startup_steps)

    def resolved_kmax(self) -> int:
        return self.kmax if self.kmax is not None else self.time_grid().n_coarse

    def resolved_threads(self) -> int:
        return self.threads if self.threads is not None else settings.default_threads()

    def resolved_snapshot_times(self) -> List[float]:
        if self.snapshot_times is not None:
            return list(self.snapshot_times)
        return [fraction * self.final_time for fraction in (0.1, 0.3, 0.5, 1.0)]
