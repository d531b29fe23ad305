# wemp/exceptions.py
from typing import Any, Dict, Optional


class WempError(Exception):
    """
    Base error for the solver library.

    Args:
        detail (str): Human-readable description of the failure.
        context (Optional[Dict[str, Any]]): Extra values that locate the failure
            (node coordinates, step index, residual, ...).
    """

    def __init__(self, detail: str, context: Optional[Dict[str, Any]] = None):
        self.detail = detail
        self.context = dict(context or {})
        super().__init__(self.__str__())

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        extras = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.detail} ({extras})"


class MeshError(WempError, ValueError):
    """Degenerate grid or operands built on different meshes."""


class CoefficientError(WempError, ValueError):
    """Invalid permeability values, overlapping inclusions or malformed field files."""


class AlignmentError(WempError, ValueError):
    """Wavelet level incompatible with the fine segments of an edge."""

    def __init__(self, detail: str, max_level: int, context: Optional[Dict[str, Any]] = None):
        self.max_level = max_level
        merged = {"max_level": max_level}
        merged.update(context or {})
        super().__init__(detail, merged)


class SolverError(WempError, RuntimeError):
    """Singular factorization, CG non-convergence or a failed time step."""


class ProjectionError(WempError, RuntimeError):
    """Rank-deficient Gram matrix or an empty multiscale space."""


class PropagationError(WempError, RuntimeError):
    """A propagator failed on one coarse time interval."""


class ConfigurationError(WempError, ValueError):
    """Inconsistent experiment, time-grid or problem data."""


class EvaluationError(WempError, ValueError):
    """A user-supplied field returned non-finite values."""
