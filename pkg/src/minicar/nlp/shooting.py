"""Gauss-Newton SQP for multiple-shooting problems with banded KKT systems.

Decision variables are stage blocks ``z_i = [x_i, v_i]`` for ``i = 0..N``,
coupled only through ``x_{i+1} = F_i(x_i, v_i)``. Each stage contributes a
least-squares residual ``r_i(x_i, v_i)`` and an optional linear term, so the
Gauss-Newton Hessian is block diagonal and the KKT matrix, ordered
``[x_0, v_0, lam_0, x_1, v_1, lam_1, ...]``, is banded. Box constraints are
handled inside each QP by a primal-dual interior point method whose Newton
systems reuse the same banded structure. ``v_N`` exists for uniformity; pin it
with equal bounds when unused.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack

from .common import CONVERGED, INFEASIBLE_BOUNDS, MAX_ITER, SolveReport, projected_gradient_norm

# dynamics(X[:N], V[:N], jac) -> (F (N,nx), Fx (N,nx,nx) | None, Fv (N,nx,nv) | None)
DynamicsFn = Callable[[np.ndarray, np.ndarray, bool], tuple]
# residuals(X, V, jac) -> (r (N+1,nr), Rx (N+1,nr,nx) | None, Rv (N+1,nr,nv) | None)
ResidualFn = Callable[[np.ndarray, np.ndarray, bool], tuple]


@dataclass
class ShootingProblem:
    N: int
    nx: int
    nv: int
    dynamics: DynamicsFn
    residuals: ResidualFn
    x_lower: np.ndarray | None = None
    x_upper: np.ndarray | None = None
    v_lower: np.ndarray | None = None
    v_upper: np.ndarray | None = None
    linear: np.ndarray | None = None  # (N+1, nx+nv) linear cost coefficients

    def __post_init__(self):
        N, nx, nv = self.N, self.nx, self.nv

        def fill(a, shape, val):
            if a is None:
                return np.full(shape, val)
            return np.broadcast_to(np.asarray(a, dtype=float), shape).copy()

        self.x_lower = fill(self.x_lower, (N + 1, nx), -np.inf)
        self.x_upper = fill(self.x_upper, (N + 1, nx), np.inf)
        self.v_lower = fill(self.v_lower, (N + 1, nv), -np.inf)
        self.v_upper = fill(self.v_upper, (N + 1, nv), np.inf)
        self.linear = fill(self.linear, (N + 1, nx + nv), 0.0)

    @property
    def nz(self) -> int:
        return self.nx + self.nv

    def lower(self) -> np.ndarray:
        return np.concatenate([self.x_lower, self.v_lower], axis=1).ravel()

    def upper(self) -> np.ndarray:
        return np.concatenate([self.x_upper, self.v_upper], axis=1).ravel()

    def split(self, z):
        Z = np.asarray(z, dtype=float).reshape(self.N + 1, self.nz)
        return Z[:, :self.nx], Z[:, self.nx:]

    def join(self, X, V) -> np.ndarray:
        return np.concatenate([np.asarray(X, float), np.asarray(V, float)], axis=1).ravel()


@dataclass(frozen=True)
class ShootingOptions:
    tol_g: float = 1e-8
    tol_c: float = 1e-8
    max_iter: int = 50
    regularization: float = 1e-8
    qp_tol: float = 1e-11
    qp_max_iter: int = 60
    armijo: float = 1e-4
    min_step: float = 1e-10
    # Levenberg-style damping added to the QP Hessian when steps get cut
    damping0: float = 1e-3
    damping_max: float = 1e8


@dataclass
class _Evaluation:
    r: np.ndarray
    c: np.ndarray
    cost: float
    Rx: np.ndarray | None = None
    Rv: np.ndarray | None = None
    Fx: np.ndarray | None = None
    Fv: np.ndarray | None = None


class BandedKKT:
    """Index bookkeeping for the interleaved KKT ordering of one problem shape."""

    def __init__(self, N: int, nx: int, nv: int, fixed: np.ndarray):
        self.N, self.nx, self.nv = N, nx, nv
        nz = nx + nv
        S = 2 * nx + nv
        self.n = N * S + nz
        stage = np.arange(N + 1)[:, None] * S
        self.prim = (stage + np.arange(nz)).ravel()            # z index -> KKT index
        self.dual = (stage[:N] + nz + np.arange(nx)).ravel()    # lambda index -> KKT index
        # Hessian blocks
        blk = self.prim.reshape(N + 1, nz)
        self.h_rows = np.repeat(blk[:, :, None], nz, axis=2).ravel()
        self.h_cols = np.repeat(blk[:, None, :], nz, axis=1).ravel()
        # constraint blocks: lambda_i rows against [x_i, v_i] and x_{i+1}
        lam = self.dual.reshape(N, nx)
        self.c_rows = np.repeat(lam[:, :, None], nz, axis=2).ravel()
        self.c_cols = np.repeat(blk[:N, None, :], nx, axis=1).ravel()
        self.i_rows = lam.ravel()
        self.i_cols = blk[1:, :nx].ravel()
        rows = np.concatenate([self.h_rows, self.c_rows, self.c_cols, self.i_rows, self.i_cols])
        cols = np.concatenate([self.h_cols, self.c_cols, self.c_rows, self.i_cols, self.i_rows])
        self.kl = self.ku = int(np.max(np.abs(rows - cols)))

        self.fixed = np.asarray(fixed, dtype=bool)
        fixed_kkt = np.zeros(self.n, dtype=bool)
        fixed_kkt[self.prim[self.fixed]] = True
        self.fixed_kkt = fixed_kkt
        self.h_keep = ~(fixed_kkt[self.h_rows] | fixed_kkt[self.h_cols])
        self.c_keep = ~fixed_kkt[self.c_cols]
        self.i_keep = ~fixed_kkt[self.i_cols]

    def factor(self, H: np.ndarray, sigma: np.ndarray, Fx: np.ndarray, Fv: np.ndarray):
        """LU-factor the KKT matrix for stage Hessians ``H`` plus diagonal ``sigma``."""
        N, nx, nz = self.N, self.nx, self.nx + self.nv
        kl, ku = self.kl, self.ku
        ab = np.zeros((2 * kl + ku + 1, self.n))
        Hs = H.copy()
        idx = np.arange(nz)
        Hs[:, idx, idx] += sigma.reshape(N + 1, nz)
        off = kl + ku
        hv = Hs.ravel()
        k = self.h_keep
        ab[off + self.h_rows[k] - self.h_cols[k], self.h_cols[k]] = hv[k]
        cv = -np.concatenate([Fx, Fv], axis=2).ravel()
        k = self.c_keep
        ab[off + self.c_rows[k] - self.c_cols[k], self.c_cols[k]] = cv[k]
        ab[off + self.c_cols[k] - self.c_rows[k], self.c_rows[k]] = cv[k]
        k = self.i_keep
        ab[off + self.i_rows[k] - self.i_cols[k], self.i_cols[k]] = 1.0
        ab[off + self.i_cols[k] - self.i_rows[k], self.i_rows[k]] = 1.0
        fk = np.flatnonzero(self.fixed_kkt)
        ab[off, fk] = 1.0
        # constraint rows left without any free variable
        dead = np.flatnonzero(~np.any(ab[:, self.dual] != 0.0, axis=0))
        ab[off, self.dual[dead]] = 1.0
        lu, piv, info = lapack.dgbtrf(ab, kl, ku)
        if info < 0:
            raise np.linalg.LinAlgError(f"dgbtrf argument error {info}")
        return lu, piv, self.dual[dead]

    def solve(self, factors, rhs_primal: np.ndarray, rhs_dual: np.ndarray):
        lu, piv, dead = factors
        rhs = np.zeros(self.n)
        rhs[self.prim] = rhs_primal
        rhs[self.dual] = rhs_dual
        rhs[self.fixed_kkt] = 0.0
        rhs[dead] = 0.0
        sol, info = lapack.dgbtrs(lu, self.kl, self.ku, rhs, piv)
        if info != 0:
            raise np.linalg.LinAlgError("banded solve failed")
        return sol[self.prim], sol[self.dual]


def _constraint_transpose(Fx, Fv, lam, N, nx, nv):
    """C^T lam for C d = dx_{i+1} - Fx_i dx_i - Fv_i dv_i."""
    out = np.zeros((N + 1, nx + nv))
    L = lam.reshape(N, nx)
    out[:N, :nx] -= np.einsum("kij,ki->kj", Fx, L)
    out[:N, nx:] -= np.einsum("kij,ki->kj", Fv, L)
    out[1:, :nx] += L
    return out.ravel()


def _constraint_apply(Fx, Fv, d, N, nx, nv):
    D = d.reshape(N + 1, nx + nv)
    return (D[1:, :nx] - np.einsum("kij,kj->ki", Fx, D[:N, :nx])
            - np.einsum("kij,kj->ki", Fv, D[:N, nx:])).ravel()


def _hess_apply(H, d, N, nz):
    return np.einsum("kij,kj->ki", H, d.reshape(N + 1, nz)).ravel()


def solve_box_qp(kkt: BandedKKT, H, g, Fx, Fv, c, lo, hi, tol=1e-11, max_iter=60):
    """Solve ``min 1/2 d'Hd + g'd  s.t.  C d = -c,  lo <= d <= hi``.

    Fixed variables (``kkt.fixed``) are held at zero. Returns
    ``(d, lam, status_ok)``.
    """
    N, nx, nv = kkt.N, kkt.nx, kkt.nv
    nz = nx + nv
    n = (N + 1) * nz
    free = ~kkt.fixed
    L = np.flatnonzero(free & np.isfinite(lo))
    U = np.flatnonzero(free & np.isfinite(hi))
    if L.size + U.size == 0:
        f = kkt.factor(H, np.zeros(n), Fx, Fv)
        d, lam = kkt.solve(f, -g, -c)
        return d, lam, True

    d = np.clip(np.zeros(n), lo, hi)
    d[kkt.fixed] = 0.0
    lam = np.zeros(N * nx)
    sl = np.maximum(d[L] - lo[L], 1e-2)
    su = np.maximum(hi[U] - d[U], 1e-2)
    yl = np.ones(L.size)
    yu = np.ones(U.size)
    mb = L.size + U.size
    gscale = 1.0 + np.max(np.abs(g), initial=0.0)
    cscale = 1.0 + np.max(np.abs(c), initial=0.0)
    ok = False
    for _ in range(max_iter):
        rd = _hess_apply(H, d, N, nz) + g + _constraint_transpose(Fx, Fv, lam, N, nx, nv)
        rd[L] -= yl
        rd[U] += yu
        rd[kkt.fixed] = 0.0
        rp = _constraint_apply(Fx, Fv, d, N, nx, nv) + c
        rl = d[L] - lo[L] - sl
        ru = hi[U] - d[U] - su
        mu = (sl @ yl + su @ yu) / mb
        if (np.max(np.abs(rd)) <= tol * gscale and np.max(np.abs(rp), initial=0.0) <= tol * cscale
                and np.max(np.abs(rl), initial=0.0) <= tol and np.max(np.abs(ru), initial=0.0) <= tol
                and mu <= tol * gscale):
            ok = True
            break
        sigma = np.zeros(n)
        sigma[L] += yl / sl
        sigma[U] += yu / su
        f = kkt.factor(H, sigma, Fx, Fv)

        def direction(rcl, rcu):
            rhs = -rd.copy()
            rhs[L] += (rcl - yl * rl) / sl
            rhs[U] -= (rcu - yu * ru) / su
            dd, dlam = kkt.solve(f, rhs, -rp)
            dsl = dd[L] + rl
            dyl = (rcl - yl * dsl) / sl
            dsu = -dd[U] + ru
            dyu = (rcu - yu * dsu) / su
            return dd, dlam, dsl, dyl, dsu, dyu

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        aff = direction(-sl * yl, -su * yu)
        a_aff = min(max_step(sl, aff[2]), max_step(yl, aff[3]), max_step(su, aff[4]), max_step(yu, aff[5]))
        mu_aff = ((sl + a_aff * aff[2]) @ (yl + a_aff * aff[3]) + (su + a_aff * aff[4]) @ (yu + a_aff * aff[5])) / mb
        sig = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dd, dlam, dsl, dyl, dsu, dyu = direction(
            -sl * yl - aff[2] * aff[3] + sig * mu,
            -su * yu - aff[4] * aff[5] + sig * mu,
        )
        a = min(max_step(sl, dsl), max_step(yl, dyl), max_step(su, dsu), max_step(yu, dyu))
        a = min(1.0, 0.995 * a) if a < 1.0 else 1.0
        d = d + a * dd
        lam = lam + a * dlam
        sl = sl + a * dsl
        yl = yl + a * dyl
        su = su + a * dsu
        yu = yu + a * dyu
        sl = np.maximum(sl, 1e-300)
        su = np.maximum(su, 1e-300)
        yl = np.maximum(yl, 1e-300)
        yu = np.maximum(yu, 1e-300)
    d = np.clip(d, lo, hi)
    d[kkt.fixed] = 0.0
    polished = _polish_active_set(kkt, H, g, Fx, Fv, c, lo, hi, L[yl > sl], U[yu > su])
    if polished is not None:
        return polished[0], polished[1], True
    return d, lam, ok


def _polish_active_set(kkt, H, g, Fx, Fv, c, lo, hi, at_lo, at_hi):
    """Re-solve with the interior-point active set pinned exactly on its bounds.

    Returns ``None`` when the guessed active set is inconsistent.
    """
    N, nx, nv = kkt.N, kkt.nx, kkt.nv
    nz = nx + nv
    n = (N + 1) * nz
    d0 = np.zeros(n)
    d0[at_lo] = lo[at_lo]
    d0[at_hi] = hi[at_hi]
    pinned = kkt.fixed.copy()
    pinned[at_lo] = True
    pinned[at_hi] = True
    sub = BandedKKT(N, nx, nv, pinned)
    g0 = g + _hess_apply(H, d0, N, nz)
    c0 = c + _constraint_apply(Fx, Fv, d0, N, nx, nv)
    try:
        dd, lam = sub.solve(sub.factor(H, np.zeros(n), Fx, Fv), -g0, -c0)
    except np.linalg.LinAlgError:
        return None
    d = d0 + np.where(pinned, 0.0, dd)
    if not np.all(np.isfinite(d)):
        return None
    scale = 1e-9 * (1.0 + np.max(np.abs(d)))
    if np.any(d < lo - scale) or np.any(d > hi + scale):
        return None
    if np.max(np.abs(_constraint_apply(Fx, Fv, d, N, nx, nv) + c), initial=0.0) > 1e-8 * (1.0 + np.max(np.abs(c), initial=0.0)):
        return None
    # bound multipliers must have the right sign
    grad = _hess_apply(H, d, N, nz) + g + _constraint_transpose(Fx, Fv, lam, N, nx, nv)
    gtol = 1e-9 * (1.0 + np.max(np.abs(g), initial=0.0))
    if np.any(grad[at_lo] < -gtol) or np.any(grad[at_hi] > gtol):
        return None
    d = np.clip(d, lo, hi)
    d[kkt.fixed] = 0.0
    return d, lam


def _evaluate(p: ShootingProblem, z: np.ndarray, jac: bool) -> _Evaluation:
    X, V = p.split(z)
    F, Fx, Fv = p.dynamics(X[:p.N], V[:p.N], jac)
    r, Rx, Rv = p.residuals(X, V, jac)
    c = (X[1:] - F).ravel()
    cost = float(np.sum(r * r) + np.sum(p.linear.ravel() * z))
    return _Evaluation(r, c, cost, Rx, Rv, Fx, Fv)


def _gradient(p: ShootingProblem, ev: _Evaluation) -> np.ndarray:
    gx = 2.0 * np.einsum("kri,kr->ki", ev.Rx, ev.r)
    gv = 2.0 * np.einsum("kri,kr->ki", ev.Rv, ev.r)
    return np.concatenate([gx, gv], axis=1).ravel() + p.linear.ravel()


def problem_cost(p: ShootingProblem, z) -> float:
    return _evaluate(p, np.asarray(z, dtype=float), False).cost


def kkt_optimality(p: ShootingProblem, z, lam) -> tuple[float, float]:
    """Projected Lagrangian gradient and constraint violation at ``(z, lam)``."""
    z = np.asarray(z, dtype=float)
    ev = _evaluate(p, z, True)
    grad = _gradient(p, ev) + _constraint_transpose(ev.Fx, ev.Fv, np.asarray(lam, float), p.N, p.nx, p.nv)
    lo, hi = p.lower(), p.upper()
    free = lo < hi
    stat = projected_gradient_norm(z[free], grad[free], lo[free], hi[free])
    viol = float(np.max(np.abs(ev.c), initial=0.0))
    return stat, viol


def solve_shooting(p: ShootingProblem, warm_start, opts: ShootingOptions = ShootingOptions()) -> SolveReport:
    """Gauss-Newton SQP with an l1-merit backtracking line search."""
    N, nx, nv = p.N, p.nx, p.nv
    nz = nx + nv
    lo, hi = p.lower(), p.upper()
    z = np.asarray(warm_start, dtype=float).ravel().copy()
    if z.size != (N + 1) * nz:
        raise ValueError(f"warm start has {z.size} entries, expected {(N + 1) * nz}")
    if np.any(lo > hi):
        return SolveReport(z, np.inf, 0, INFEASIBLE_BOUNDS, np.inf)
    fixed = lo == hi
    z = np.clip(z, lo, hi)
    z[fixed] = lo[fixed]
    kkt = BandedKKT(N, nx, nv, fixed)
    nu = 0.0
    ev = _evaluate(p, z, True)
    history = [ev.cost + nu * float(np.sum(np.abs(ev.c)))]
    status = MAX_ITER
    steps = []
    lam = np.zeros(N * nx)
    stat = viol = np.inf
    mu = 0.0
    it = 0
    for it in range(opts.max_iter + 1):
        J = np.concatenate([ev.Rx, ev.Rv], axis=2)
        H = 2.0 * np.einsum("kri,krj->kij", J, J)
        diag = H[:, np.arange(nz), np.arange(nz)]
        H[:, np.arange(nz), np.arange(nz)] += opts.regularization + mu * np.maximum(diag, 1.0)
        g = _gradient(p, ev)
        d, lam, _ = solve_box_qp(kkt, H, g, ev.Fx, ev.Fv, ev.c, lo - z, hi - z,
                                 tol=opts.qp_tol, max_iter=opts.qp_max_iter)
        grad_l = g + _constraint_transpose(ev.Fx, ev.Fv, lam, N, nx, nv)
        free = ~fixed
        stat = projected_gradient_norm(z[free], grad_l[free], lo[free], hi[free])
        viol = float(np.max(np.abs(ev.c), initial=0.0))
        if viol <= opts.tol_c and stat <= opts.tol_g:
            status = CONVERGED
            break
        if it == opts.max_iter:
            break
        nu = max(nu, 1.1 * float(np.max(np.abs(lam), initial=0.0)) + 1e-8)
        c1 = float(np.sum(np.abs(ev.c)))
        merit = ev.cost + nu * c1
        slope = float(g @ d) - nu * c1
        alpha = 1.0
        accepted = False
        z_full = np.clip(z + d, lo, hi)
        z_full[fixed] = lo[fixed]
        ev_full = _evaluate(p, z_full, False)
        merit_full = ev_full.cost + nu * float(np.sum(np.abs(ev_full.c)))
        if np.isfinite(merit_full) and merit_full <= merit + opts.armijo * min(slope, 0.0):
            accepted, z_try, merit_try = True, z_full, merit_full
        elif np.all(np.isfinite(ev_full.c)):
            # second-order correction against the curvature of the constraints
            f0 = kkt.factor(H, np.zeros(z.size), ev.Fx, ev.Fv)
            d_soc, _ = kkt.solve(f0, np.zeros(z.size), -ev_full.c)
            z_soc = np.clip(z_full + d_soc, lo, hi)
            z_soc[fixed] = lo[fixed]
            ev_soc = _evaluate(p, z_soc, False)
            merit_soc = ev_soc.cost + nu * float(np.sum(np.abs(ev_soc.c)))
            if np.isfinite(merit_soc) and merit_soc <= merit + opts.armijo * min(slope, 0.0):
                accepted, z_try, merit_try = True, z_soc, merit_soc
        if not accepted:
            alpha = 0.5
        while not accepted and alpha >= opts.min_step:
            z_try = np.clip(z + alpha * d, lo, hi)
            z_try[fixed] = lo[fixed]
            ev_try = _evaluate(p, z_try, False)
            merit_try = ev_try.cost + nu * float(np.sum(np.abs(ev_try.c)))
            if np.isfinite(merit_try) and (merit_try <= merit + opts.armijo * alpha * min(slope, 0.0)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if mu < opts.damping_max and slope < 0:
                # retry from the same point with a shorter, better-conditioned step
                mu = max(10.0 * mu, opts.damping0)
                continue
            # stalled at roundoff level: keep the current point
            break
        if alpha < 0.5:
            mu = max(10.0 * mu, opts.damping0)
        elif alpha == 1.0:
            mu = mu / 10.0 if mu > opts.damping0 else 0.0
        z = z_try
        ev = _evaluate(p, z, True)
        steps.append((merit, merit_try))
        history.append(merit_try)
    return SolveReport(z, ev.cost, it, status, stat, viol, lam, history, steps)
