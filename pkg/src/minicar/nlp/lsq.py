"""Box-constrained nonlinear least squares by projected Levenberg-Marquardt."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .common import CONVERGED, INFEASIBLE_BOUNDS, MAX_ITER, SolveReport, projected_gradient_norm


@dataclass(frozen=True)
class ResidualProblem:
    """Minimise ``||residual(z)||^2`` over ``lower <= z <= upper``.

    ``jacobian`` may be ``None``, in which case central differences are used.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None
    n: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def bounds(self):
        lo = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        hi = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        return lo, hi

    def jac(self, z: np.ndarray) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(z), dtype=float)
        return finite_difference_jacobian(self.residual, z)


def finite_difference_jacobian(fun, z, h: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        step = h * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        cols.append((np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2 * step))
    return np.column_stack(cols)


@dataclass(frozen=True)
class LMOptions:
    tol_g: float = 1e-8
    max_iter: int = 200
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e16


def optimality(problem: ResidualProblem, z) -> float:
    """Projected-gradient optimality of ``z``; recomputable from the solution alone."""
    z = np.asarray(z, dtype=float)
    lo, hi = problem.bounds()
    r = np.asarray(problem.residual(z), dtype=float)
    g = 2.0 * problem.jac(z).T @ r
    return projected_gradient_norm(z, g, lo, hi)


def solve_nlls(problem: ResidualProblem, z0, opts: LMOptions = LMOptions()) -> SolveReport:
    lo, hi = problem.bounds()
    z = np.asarray(z0, dtype=float).copy()
    if np.any(lo > hi):
        return SolveReport(z, np.inf, 0, INFEASIBLE_BOUNDS, np.inf)
    z = np.clip(z, lo, hi)
    r = np.asarray(problem.residual(z), dtype=float)
    cost = float(r @ r)
    history = [cost]
    lam = opts.lambda0
    status = MAX_ITER
    it = 0
    for it in range(opts.max_iter + 1):
        J = problem.jac(z)
        g = 2.0 * J.T @ r
        opt = projected_gradient_norm(z, g, lo, hi)
        if opt <= opts.tol_g:
            status = CONVERGED
            break
        if it == opts.max_iter:
            break
        # variables pinned at a bound with the gradient pushing outwards stay put
        active = ((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0))
        free = ~active
        Jf = J[:, free]
        JtJ = Jf.T @ Jf
        gf = Jf.T @ r
        diag = np.diag(JtJ).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam <= opts.lambda_max:
            step = np.zeros_like(z)
            try:
                step[free] = np.linalg.solve(JtJ + lam * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_up
                continue
            z_new = np.clip(z + step, lo, hi)
            r_new = np.asarray(problem.residual(z_new), dtype=float)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = cost_new < cost or np.array_equal(z_new, z)
                z, r, cost = z_new, r_new, cost_new
                lam = max(lam / opts.lambda_down, 1e-12)
                history.append(cost)
                break
            lam *= opts.lambda_up
        if not accepted:
            # no decrease possible at machine precision; final point is the best we have
            J = problem.jac(z)
            opt = projected_gradient_norm(z, 2.0 * J.T @ r, lo, hi)
            status = CONVERGED if opt <= opts.tol_g else MAX_ITER
            break
    return SolveReport(z, cost, it, status, opt, history=history)
