from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE_BOUNDS = "infeasible_bounds"


@dataclass
class SolveReport:
    """Outcome of a solver run.

    ``history`` holds the objective (``solve_nlls``) or the l1 merit
    (``solve_shooting``) after each accepted step, starting with the initial
    value.
    """

    x: np.ndarray
    cost: float
    iterations: int
    status: str
    optimality: float
    constraint_violation: float = 0.0
    multipliers: np.ndarray | None = None
    history: list[float] = field(default_factory=list)
    # (merit before, merit after) of each accepted SQP step, same penalty weight
    step_merits: list[tuple[float, float]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def projected_gradient_norm(z, grad, lower, upper) -> float:
    """Infinity norm of ``z - P(z - grad)``; zero at a box-constrained stationary point."""
    if z.size == 0:
        return 0.0
    return float(np.max(np.abs(z - np.clip(z - grad, lower, upper))))


class NotConverged(RuntimeError):
    """Raised by callers that require convergence; carries the solver report."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report
