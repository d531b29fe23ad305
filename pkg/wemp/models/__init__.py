# wemp/models/__init__.py
from .experiment import CoefficientSpec, ExperimentConfig, InclusionSpec
from .problem import InitialCondition, ProblemData, SourceTerm, TimeGrid
from .solver import (
    BACKWARD_EULER,
    CRANK_NICOLSON,
    LinearSolveConfig,
    Scheme,
    SchemeConfig,
    SolverMethod,
)
