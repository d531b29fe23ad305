# wemp/configs/presets.py
"""
Named experiments and the synthetic high-contrast permeability.

The synthetic field has background 1 and disjoint rectangular channels and
blocks with values between 1e3 and 1e4.
"""
from typing import Any, Dict, Tuple

import numpy as np

from wemp.exceptions import ConfigurationError
from wemp.models.experiment import CoefficientSpec, ExperimentConfig, InclusionSpec
from wemp.models.problem import ProblemData
from wemp.models.solver import Scheme


def initial_bubble(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """u0 = x(1-x)y(1-y)."""
    return x * (1 - x) * y * (1 - y)


def oscillating_source(x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    """f = 200 pi^2 sin(pi x) sin(pi y) sin(10 pi t x)."""
    return 200 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y) * np.sin(10 * np.pi * t * x)


def preset_nonzero_source(final_time: float = 1.0) -> ProblemData:
    return ProblemData(name="nonzero-source", initial=initial_bubble, source=oscillating_source, final_time=final_time)


def preset_zero_source(final_time: float = 0.1) -> ProblemData:
    return ProblemData(name="zero-source", initial=initial_bubble, source=None, final_time=final_time)


# (x0, y0, x1, y1, value)
SYNTHETIC_INCLUSIONS: Tuple[Tuple[float, float, float, float, float], ...] = (
    (0.10, 0.15, 0.85, 0.19, 1e4),
    (0.12, 0.25, 0.22, 0.35, 3e3),
    (0.45, 0.24, 0.55, 0.34, 1e4),
    (0.15, 0.40, 0.90, 0.44, 5e3),
    (0.30, 0.52, 0.34, 0.66, 2e3),
    (0.60, 0.55, 0.64, 0.68, 1e3),
    (0.05, 0.70, 0.70, 0.73, 1e4),
    (0.75, 0.78, 0.90, 0.92, 8e3),
)


def synthetic_coefficient() -> CoefficientSpec:
    return CoefficientSpec(
        kind="inclusions",
        inclusions=[
            InclusionSpec(shape="rectangle", bounds=(x0, y0, x1, y1), value=value)
            for x0, y0, x1, y1, value in SYNTHETIC_INCLUSIONS
        ],
    )


_COMMON: Dict[str, Any] = {
    "coarse_cells": 16,
    "refinement": 8,
    "level": 2,
    "table_iterations": 4,
}

EXPERIMENT_PRESETS: Dict[str, Dict[str, Any]] = {
    "exp1": {
        "final_time": 1.0, "coarse_step": 0.1, "fine_step": 1e-3, "reference_step": 1e-4,
        "scheme": Scheme.BACKWARD_EULER, "source": "nonzero",
    },
    "exp2": {
        "final_time": 1.0, "coarse_step": 0.1, "fine_step": 1e-3, "reference_step": 1e-4,
        "scheme": Scheme.CRANK_NICOLSON, "startup_steps": 3, "source": "nonzero",
    },
    "exp3": {
        "final_time": 1.0, "coarse_step": 1e-2, "fine_step": 1e-3, "reference_step": 1e-4,
        "scheme": Scheme.BACKWARD_EULER, "source": "nonzero",
    },
    "zero-be": {
        "final_time": 0.1, "coarse_step": 1e-2, "fine_step": 1e-3, "reference_step": 1e-3,
        "scheme": Scheme.BACKWARD_EULER, "source": "zero",
    },
    "zero-cn": {
        "final_time": 0.1, "coarse_step": 1e-2, "fine_step": 1e-3, "reference_step": 1e-3,
        "scheme": Scheme.CRANK_NICOLSON, "startup_steps": 3, "source": "zero",
    },
}


def preset_config(name: str, **overrides: Any) -> ExperimentConfig:
    """
    Resolve a named preset, applying keyword overrides.

    Raises:
        ConfigurationError: If the preset name is unknown.
    """
    if name not in EXPERIMENT_PRESETS:
        raise ConfigurationError(f"unknown preset '{name}'", {"available": ", ".join(EXPERIMENT_PRESETS)})
    values: Dict[str, Any] = {"name": name, "coefficient": synthetic_coefficient()}
    values.update(_COMMON)
    values.update(EXPERIMENT_PRESETS[name])
    values.update(overrides)
    return ExperimentConfig.model_validate(values)


def problem_for(cfg: ExperimentConfig) -> ProblemData:
    if cfg.source == "zero":
        return preset_zero_source(cfg.final_time)
    return preset_nonzero_source(cfg.final_time)
