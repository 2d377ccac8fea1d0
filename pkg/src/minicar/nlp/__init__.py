"""Nonlinear least-squares and multiple-shooting solvers."""

from .common import CONVERGED, INFEASIBLE_BOUNDS, MAX_ITER, NotConverged, SolveReport
from .lsq import LMOptions, ResidualProblem, optimality, solve_nlls
from .shooting import ShootingOptions, ShootingProblem, kkt_optimality, problem_cost, solve_shooting

__all__ = [
    "CONVERGED", "INFEASIBLE_BOUNDS", "MAX_ITER", "NotConverged", "SolveReport",
    "LMOptions", "ResidualProblem", "optimality", "solve_nlls",
    "ShootingOptions", "ShootingProblem", "kkt_optimality", "problem_cost", "solve_shooting",
]
