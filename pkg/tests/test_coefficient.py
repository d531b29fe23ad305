import json

import numpy as np
import pytest
from pydantic import ValidationError

from wemp.exceptions import CoefficientError, MeshError
from wemp.models.experiment import CoefficientSpec, InclusionSpec
from wemp.services.coefficient import (
    Inclusion,
    build_inclusion_field,
    field_from_config,
    field_from_spec,
    field_from_values,
    homogeneous_field,
    load_field,
    save_field,
)
from wemp.services.grid import build_grid


def test_inclusion_cells_take_inclusion_value(small_grid, blocky_kappa):
    cx, cy = small_grid.cell_centers()
    inside = (cx > 0.30) & (cx < 0.45) & (cy > 0.30) & (cy < 0.70)
    assert np.all(blocky_kappa.values[inside] == 1e4)
    assert blocky_kappa.alpha == 1.0
    assert blocky_kappa.contrast == 1e4


def test_overlapping_inclusions_rejected(small_grid):
    with pytest.raises(CoefficientError):
        build_inclusion_field(small_grid, [
            Inclusion.rectangle(0.1, 0.1, 0.5, 0.5, 10.0),
            Inclusion.disc(0.4, 0.4, 0.2, 20.0),
        ])


def test_inclusion_value_below_background_rejected(small_grid):
    with pytest.raises(CoefficientError):
        build_inclusion_field(small_grid, [Inclusion.rectangle(0.1, 0.1, 0.5, 0.5, 0.5)])
    with pytest.raises(ValidationError):
        InclusionSpec(shape="rectangle", bounds=(0.1, 0.1, 0.5, 0.5), value=0.5)


def test_nonpositive_values_rejected():
    with pytest.raises(CoefficientError):
        field_from_values(2, [1.0, 0.0, 1.0, 1.0])
    with pytest.raises(CoefficientError):
        field_from_values(2, [1.0, 1.0, 1.0])


def test_field_is_read_only(unit_kappa):
    with pytest.raises(ValueError):
        unit_kappa.values[0] = 2.0


def test_mesh_mismatch(unit_kappa):
    with pytest.raises(MeshError):
        unit_kappa.check_grid(build_grid(2, 2))


def test_save_and_load_are_bit_exact(tmp_path, small_grid, rng):
    kappa = field_from_values(small_grid.n, 10 ** rng.uniform(0, 4, small_grid.n_cells))
    path = save_field(tmp_path / "kappa.txt", kappa)
    assert np.array_equal(load_field(path, small_grid).values, kappa.values)


def test_load_missing_file(tmp_path, small_grid):
    with pytest.raises(CoefficientError):
        load_field(tmp_path / "missing.txt", small_grid)


def test_field_from_config(tmp_path, small_grid, blocky_kappa):
    specs = [inclusion.to_spec().model_dump() for inclusion in blocky_kappa.inclusions]
    path = tmp_path / "field.json"
    path.write_text(json.dumps({"inclusions": specs}), encoding="utf-8")
    assert np.array_equal(field_from_config(path, small_grid).values, blocky_kappa.values)


def test_field_from_spec(small_grid):
    assert np.all(field_from_spec(small_grid, CoefficientSpec()).values == 1.0)
    spec = CoefficientSpec(kind="inclusions", inclusions=[
        InclusionSpec(shape="disc", center=(0.5, 0.5), radius=0.2, value=100.0),
    ])
    assert field_from_spec(small_grid, spec).beta == 100.0


def test_scaled(unit_kappa):
    assert np.all(unit_kappa.scaled(2.0).values == 2.0)
    assert np.all(homogeneous_field(build_grid(2, 2), 3.0).as_cell_grid() == 3.0)
