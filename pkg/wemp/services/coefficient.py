# wemp/services/coefficient.py
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from wemp.exceptions import CoefficientError, MeshError
from wemp.models.experiment import CoefficientSpec, InclusionSpec
from wemp.services.grid import TwoLevelGrid

logger = logging.getLogger(__name__)

# inclusion values below the background are not high-contrast inclusions
MIN_INCLUSION_VALUE = 1.0


@dataclass(frozen=True, eq=False)
class Inclusion:
    shape: str
    value: float
    params: Tuple[float, ...]

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float, value: float) -> "Inclusion":
        return cls("rectangle", float(value), (x0, y0, x1, y1))

    @classmethod
    def disc(cls, cx: float, cy: float, radius: float, value: float) -> "Inclusion":
        return cls("disc", float(value), (cx, cy, radius))

    @classmethod
    def from_spec(cls, spec: InclusionSpec) -> "Inclusion":
        if spec.shape == "rectangle":
            return cls.rectangle(*spec.bounds, value=spec.value)
        return cls.disc(*spec.center, radius=spec.radius, value=spec.value)

    def to_spec(self) -> InclusionSpec:
        if self.shape == "rectangle":
            return InclusionSpec(shape="rectangle", value=self.value, bounds=self.params)
        cx, cy, radius = self.params
        return InclusionSpec(shape="disc", value=self.value, center=(cx, cy), radius=radius)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Open-set membership test."""
        if self.shape == "rectangle":
            x0, y0, x1, y1 = self.params
            return (x > x0) & (x < x1) & (y > y0) & (y < y1)
        cx, cy, radius = self.params
        return (x - cx) ** 2 + (y - cy) ** 2 < radius ** 2


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Cell-wise constant permeability on the fine mesh, row-major by fine cell."""

    values: np.ndarray
    cells_per_axis: int
    inclusions: Tuple[Inclusion, ...] = field(default_factory=tuple)

    @property
    def alpha(self) -> float:
        return float(self.values.min())

    @property
    def beta(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.beta / self.alpha

    def check_grid(self, grid: TwoLevelGrid) -> None:
        if self.cells_per_axis != grid.n:
            raise MeshError("coefficient field and grid use different fine meshes",
                            {"field_cells": self.cells_per_axis, "grid_cells": grid.n})

    def scaled(self, factor: float) -> "CoefficientField":
        return field_from_values(self.cells_per_axis, factor * self.values)

    def as_cell_grid(self) -> np.ndarray:
        return self.values.reshape(self.cells_per_axis, self.cells_per_axis)


def field_from_values(cells_per_axis: int, values: Union[Sequence[float], np.ndarray]) -> CoefficientField:
    """Wrap raw cell values; they must be finite and positive."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size != cells_per_axis ** 2:
        raise CoefficientError("wrong number of cell values",
                               {"expected": cells_per_axis ** 2, "got": values.size})
    if not np.all(np.isfinite(values)) or values.min() <= 0.0:
        raise CoefficientError("permeability must be finite and positive", {"min": float(np.nanmin(values))})
    values.setflags(write=False)
    return CoefficientField(values=values, cells_per_axis=cells_per_axis)


def homogeneous_field(grid: TwoLevelGrid, value: float = 1.0) -> CoefficientField:
    return field_from_values(grid.n, np.full(grid.n_cells, float(value)))


def build_inclusion_field(grid: TwoLevelGrid, inclusions: Iterable[Inclusion]) -> CoefficientField:
    """
    Background value 1, value eta_j on every fine cell whose center lies in inclusion j.

    Raises:
        CoefficientError: If an inclusion value is below 1 or two inclusions
            claim the same cell.
    """
    inclusions = tuple(inclusions)
    cx, cy = grid.cell_centers()
    kappa = np.ones(grid.n_cells)
    owner = np.full(grid.n_cells, -1, dtype=np.int64)

    for j, inclusion in enumerate(inclusions):
        if not np.isfinite(inclusion.value) or inclusion.value < MIN_INCLUSION_VALUE:
            raise CoefficientError("inclusion value below the background", {"inclusion": j, "value": inclusion.value})
        mask = inclusion.contains(cx, cy)
        clash = mask & (owner >= 0)
        if clash.any():
            other = int(owner[np.flatnonzero(clash)[0]])
            raise CoefficientError("overlapping inclusions", {"first": other, "second": j})
        owner[mask] = j
        kappa[mask] = inclusion.value
        if not mask.any():
            logger.warning(f"Inclusion {j} covers no cell center on the {grid.n}x{grid.n} mesh")

    result = field_from_values(grid.n, kappa)
    result = CoefficientField(values=result.values, cells_per_axis=grid.n, inclusions=inclusions)
    logger.info(f"Coefficient field: {len(inclusions)} inclusions, contrast {result.contrast:.3g}")
    return result


def save_field(path: Union[str, Path], coefficient: CoefficientField) -> Path:
    """Write cell values row by row (from y = 0), repr-formatted so reloading is bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = coefficient.as_cell_grid()
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
    return path


def load_field(path: Union[str, Path], grid: TwoLevelGrid) -> CoefficientField:
    path = Path(path)
    if not path.exists():
        raise CoefficientError("field file not found", {"path": str(path)})
    try:
        values = [float(token) for token in path.read_text(encoding="utf-8").split()]
    except ValueError as e:
        raise CoefficientError(f"malformed field file: {e}", {"path": str(path)})
    return field_from_values(grid.n, values)


def field_from_config(path: Union[str, Path], grid: TwoLevelGrid) -> CoefficientField:
    """Read a JSON list of inclusions (or an object with an "inclusions" key)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = raw.get("inclusions", [])
    specs: List[InclusionSpec] = [InclusionSpec.model_validate(item) for item in raw]
    return build_inclusion_field(grid, [Inclusion.from_spec(spec) for spec in specs])


def field_from_spec(grid: TwoLevelGrid, spec: CoefficientSpec) -> CoefficientField:
    if spec.kind == "homogeneous":
        return homogeneous_field(grid)
    if spec.kind == "inclusions":
        return build_inclusion_field(grid, [Inclusion.from_spec(item) for item in spec.inclusions])
    path = Path(spec.path)
    if path.suffix.lower() == ".json":
        return field_from_config(path, grid)
    return load_field(path, grid)
