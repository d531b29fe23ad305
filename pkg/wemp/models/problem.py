# wemp/models/problem.py
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wemp.utils.helpers import integer_ratio

InitialCondition = Callable[[np.ndarray, np.ndarray], np.ndarray]
SourceTerm = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


class ProblemData(BaseModel):
    """
    Data of the parabolic problem u_t - div(kappa grad u) = f with u = 0 on the boundary.

    `initial` is evaluated as initial(x, y) and `source` as source(x, y, t) on
    arrays of node coordinates. A missing source means f = 0. u0 must vanish on
    the boundary; solvers check this before the first step.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "custom"
    initial: InitialCondition
    source: Optional[SourceTerm] = None
    final_time: float = Field(gt=0.0)


class TimeGrid(BaseModel):
    """Coarse points T^n = n*coarse_step and fine points t_m = m*fine_step on [0, final_time]."""

    model_config = ConfigDict(frozen=True)

    final_time: float = Field(gt=0.0)
    coarse_step: float = Field(gt=0.0)
    fine_step: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _check_divisibility(self) -> "TimeGrid":
        integer_ratio(self.final_time, self.coarse_step, "final_time / coarse_step")
        ratio = integer_ratio(self.coarse_step, self.fine_step, "coarse_step / fine_step")
        if ratio < 2:
            raise ValueError(f"coarse_step / fine_step must be at least 2, got {ratio}")
        return self

    @property
    def n_coarse(self) -> int:
        return integer_ratio(self.final_time, self.coarse_step)

    @property
    def ratio(self) -> int:
        return integer_ratio(self.coarse_step, self.fine_step)

    @property
    def n_fine(self) -> int:
        return self.n_coarse * self.ratio

    def coarse_time(self, n: int) -> float:
        return n * self.coarse_step

    def coarse_times(self) -> List[float]:
        return [self.coarse_time(n) for n in range(self.n_coarse + 1)]
