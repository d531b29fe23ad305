# wemp/models/solver.py
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class SolverMethod(str, Enum):
    DIRECT = "direct"
    CG = "cg"


class LinearSolveConfig(BaseModel):
    """Linear solver settings for fine-grid systems."""

    model_config = ConfigDict(frozen=True)

    method: SolverMethod = SolverMethod.DIRECT
    tolerance: float = Field(1e-12, gt=0.0, le=1e-6)
    max_iterations: int = Field(10_000, ge=1)


class Scheme(str, Enum):
    BACKWARD_EULER = "backward-euler"
    CRANK_NICOLSON = "crank-nicolson"


class SchemeConfig(BaseModel):
    """Time-stepping scheme; startup_steps backward Euler steps precede Crank-Nicolson at t = 0."""

    model_config = ConfigDict(frozen=True)

    scheme: Scheme = Scheme.BACKWARD_EULER
    startup_steps: int = Field(3, ge=0)

    def uses_backward_euler(self, step_index: int) -> bool:
        """Whether global fine step step_index (t_m -> t_{m+1}) is a backward Euler step."""
        if self.scheme is Scheme.BACKWARD_EULER:
            return True
        return step_index < self.startup_steps


BACKWARD_EULER = SchemeConfig(scheme=Scheme.BACKWARD_EULER)
CRANK_NICOLSON = SchemeConfig(scheme=Scheme.CRANK_NICOLSON)
