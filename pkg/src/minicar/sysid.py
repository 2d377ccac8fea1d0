"""Offline identification of the parameter set from logged input/output data.

The full-horizon problem is solved by multiple shooting. Free parameters are
carried as extra states with ``theta_{j+1} = theta_j`` so the KKT system stays
banded; parameters whose box collapses to a point are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import NX, discrete_step, dynamics_jacobians
from .estimation import EkfModel, EkfState, SqrtWeight, ekf_predict, ekf_update, measurement_residuals, vehicle_ekf_model
from .nlp import NotConverged, ShootingOptions, ShootingProblem, SolveReport, solve_shooting
from .params import N_MODEL, DriveConfig, NoiseLevels, ParamSet
from .sensors import MeasurementFrame, channel_names, n_outputs


@dataclass(eq=False)
class Dataset:
    """Input/output samples on a uniform grid; ``u[j]`` is applied over ``[t_j, t_j + dt)``."""

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    dt: float
    n_bs: int
    truth: np.ndarray | None = None          # ground-truth states, simulated data only
    channels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 2)
        self.y = np.asarray(self.y, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        L = len(self.t)
        if L < 2:
            raise ValueError("a dataset needs at least two samples")
        if self.u.shape[0] != L or self.y.shape != (L, n_outputs(self.n_bs)) or self.mask.shape != self.y.shape:
            raise ValueError("dataset arrays have inconsistent shapes")
        if np.any(np.abs(np.diff(self.t) - self.dt) > 1e-6):
            raise ValueError("timestamps must be strictly increasing on a uniform grid")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float).reshape(L, NX)
        if not self.channels:
            self.channels = channel_names(self.n_bs)

    def __len__(self) -> int:
        return len(self.t)

    def frame(self, j: int) -> MeasurementFrame:
        return MeasurementFrame(float(self.t[j]), self.y[j], self.mask[j])

    def frames(self) -> list[MeasurementFrame]:
        return [self.frame(j) for j in range(len(self))]

    def slice(self, start: int, stop: int) -> "Dataset":
        tr = None if self.truth is None else self.truth[start:stop]
        return Dataset(self.t[start:stop], self.u[start:stop], self.y[start:stop], self.mask[start:stop],
                       self.dt, self.n_bs, tr, list(self.channels))


@dataclass
class SysIdConfig:
    """Prior, weights (as standard deviations, weights are their inverse squares) and boxes.

    A parameter is free iff ``theta_lower < theta_upper``; pinned parameters
    keep their (equal) bound value exactly.
    """

    prior: ParamSet
    x0_prior: np.ndarray
    theta_std: np.ndarray
    x0_std: np.ndarray
    process_std: np.ndarray                  # per step at dt
    measurement_std: np.ndarray
    theta_lower: np.ndarray
    theta_upper: np.ndarray
    x_lower: np.ndarray | None = None
    x_upper: np.ndarray | None = None
    w_lower: np.ndarray | None = None
    w_upper: np.ndarray | None = None
    warm_start: str = "prior-ekf"            # prior-ekf | provided | cold
    provided_states: np.ndarray | None = None
    substeps: int = 4
    n_starts: int = 1                        # extra starts draw free parameters uniformly inside their box
    start_seed: int = 0
    solver: ShootingOptions = field(default_factory=lambda: ShootingOptions(max_iter=60, tol_g=1e-6, tol_c=1e-8))
    drive: DriveConfig = field(default_factory=DriveConfig)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.theta_lower) < np.asarray(self.theta_upper))

    @classmethod
    def default(cls, prior: ParamSet, x0_prior, noise: NoiseLevels, dt: float, free=None,
                rel_box: float = 0.5, rel_std: float = 0.5, **kw) -> "SysIdConfig":
        """Boxes of +-``rel_box`` around the prior for ``free`` parameter names.

        By default every model parameter except m, l_f and l_r is free;
        encoder and station parameters are pinned.
        """
        names = prior.names()
        th = prior.to_vector()
        if free is None:
            free = [n for n in names[:N_MODEL] if n not in ("m", "l_f", "l_r")]
        lo, hi = th.copy(), th.copy()
        for n in free:
            i = names.index(n)
            lo[i] = th[i] - rel_box * abs(th[i])
            hi[i] = th[i] + rel_box * abs(th[i])
        std = np.maximum(rel_std * np.abs(th), 1e-6)
        return cls(prior=prior, x0_prior=np.asarray(x0_prior, float), theta_std=std,
                   x0_std=np.array([0.05, 0.05, 0.05, 0.2, 0.2, 0.5]),
                   process_std=noise.process_step_std(dt), measurement_std=noise.measurement_std(prior.n_bs),
                   theta_lower=lo, theta_upper=hi, **kw)


@dataclass
class SysIdResult:
    theta: ParamSet
    states: np.ndarray                       # (L, 6)
    process_noise: np.ndarray                # (L - 1, 6)
    measurement_noise: np.ndarray            # (L, n_y), zero on invalid channels
    cost: float
    report: SolveReport

    @property
    def converged(self) -> bool:
        return self.report.converged


class _Layout:
    def __init__(self, data: Dataset, cfg: SysIdConfig):
        self.prior = cfg.prior.to_vector()
        lo = np.asarray(cfg.theta_lower, float)
        hi = np.asarray(cfg.theta_upper, float)
        if np.any(lo > hi):
            raise ValueError("parameter box is inconsistent")
        self.base = self.prior.copy()
        pinned = lo == hi
        self.base[pinned] = lo[pinned]
        self.free = np.flatnonzero(~pinned)
        self.nf = len(self.free)
        # free parameters are carried relative to their prior magnitude for conditioning
        mag = np.abs(self.prior[self.free])
        self.scale = np.where(mag > 0, mag, 1.0)
        self.nx = NX + self.nf
        self.model_free = self.free[self.free < N_MODEL]
        self.model_cols = np.flatnonzero(self.free < N_MODEL)
        self.n_bs = cfg.prior.n_bs

    def theta_rows(self, X) -> np.ndarray:
        T = np.tile(self.base, (len(X), 1))
        T[:, self.free] = X[:, NX:] * self.scale
        return T

    def model_rows(self, X) -> np.ndarray:
        return self.theta_rows(X)[:, :N_MODEL]


def _grouped_measurements(Y, mask, X, U, lay: _Layout, drive):
    """Measurement residuals with stage-wise parameters, grouped by identical rows."""
    T = lay.theta_rows(X)
    e = np.zeros_like(Y)
    valid = np.zeros(Y.shape, bool)
    ex = np.zeros(Y.shape + (NX,))
    eth = np.zeros(Y.shape + (len(lay.base),))
    uniq, inv = np.unique(T, axis=0, return_inverse=True)
    for g in range(len(uniq)):
        rows = np.flatnonzero(inv.ravel() == g)
        th = ParamSet.from_vector(uniq[g], lay.n_bs)
        e[rows], valid[rows], ex[rows], eth[rows] = measurement_residuals(Y[rows], mask[rows], X[rows, :NX], U[rows], th, drive)
    return e, valid, ex, eth


def _build_problem(data: Dataset, cfg: SysIdConfig, lay: _Layout) -> ShootingProblem:
    L = len(data)
    N = L - 1
    ny = data.y.shape[1]
    nf, nxa = lay.nf, lay.nx
    U = data.u
    wx = SqrtWeight.from_std(cfg.x0_std)
    wth = SqrtWeight.from_std(np.asarray(cfg.theta_std, float)[lay.free]) if nf else None
    ww = SqrtWeight.from_std(cfg.process_std)
    wy = SqrtWeight.from_std(cfg.measurement_std)
    o_w = NX + nf
    o_y = o_w + NX
    nr = o_y + ny
    th_prior = lay.prior[lay.free]

    def dynamics(X, V, jac):
        P = lay.model_rows(X)
        if not jac:
            xn = discrete_step(X[:, :NX], U[:N], V[:, :NX], P, data.dt, cfg.drive, cfg.substeps)
            return np.hstack([xn, X[:, NX:]]), None, None
        xn, Fx, _, Fw, Fp = dynamics_jacobians(X[:, :NX], U[:N], V[:, :NX], P, data.dt, cfg.drive, cfg.substeps)
        F = np.hstack([xn, X[:, NX:]])
        A = np.zeros((N, nxa, nxa))
        A[:, :NX, :NX] = Fx
        A[:, :NX, NX + lay.model_cols] = Fp[:, :, lay.model_free] * lay.scale[lay.model_cols]
        A[:, NX:, NX:] = np.eye(nf)
        B = np.zeros((N, nxa, NX))
        B[:, :NX, :] = Fw
        return F, A, B

    def residuals(X, V, jac):
        r = np.zeros((L, nr))
        Rx = np.zeros((L, nr, nxa))
        Rv = np.zeros((L, nr, NX))
        e0, J0 = wx.apply((X[0, :NX] - cfg.x0_prior)[None], None, np.eye(NX)[None])
        r[0, :NX] = e0[0]
        Rx[0, :NX, :NX] = J0[0]
        if nf:
            et, Jt = wth.apply((X[0, NX:] * lay.scale - th_prior)[None], None, np.diag(lay.scale)[None])
            r[0, NX:o_w] = et[0]
            Rx[0, NX:o_w, NX:] = Jt[0]
        ew, Jw = ww.apply(V[:N], None, np.broadcast_to(np.eye(NX), (N, NX, NX)))
        r[:N, o_w:o_y] = ew
        Rv[:N, o_w:o_y] = Jw
        e, valid, ex, eth = _grouped_measurements(data.y, data.mask, X, U, lay, cfg.drive)
        ey, Jx, Jt = wy.apply(e, valid, ex, eth[:, :, lay.free] * lay.scale)
        r[:, o_y:] = ey
        Rx[:, o_y:, :NX] = Jx
        Rx[:, o_y:, NX:] = Jt
        return r, Rx, Rv

    def box(a, n, default):
        return np.full(n, default) if a is None else np.asarray(a, dtype=float)

    x_lo = np.concatenate([box(cfg.x_lower, NX, -np.inf), np.asarray(cfg.theta_lower, float)[lay.free] / lay.scale])
    x_hi = np.concatenate([box(cfg.x_upper, NX, np.inf), np.asarray(cfg.theta_upper, float)[lay.free] / lay.scale])
    v_lo = np.tile(box(cfg.w_lower, NX, -np.inf), (L, 1))
    v_hi = np.tile(box(cfg.w_upper, NX, np.inf), (L, 1))
    v_lo[N] = v_hi[N] = 0.0
    return ShootingProblem(N, nxa, NX, dynamics, residuals, x_lower=x_lo, x_upper=x_hi, v_lower=v_lo, v_upper=v_hi)


def ekf_states(data: Dataset, theta: ParamSet, x0, P0, Q, R, cfg: DriveConfig = DriveConfig(),
               substeps: int = 1, model: EkfModel | None = None) -> np.ndarray:
    """Filtered EKF estimates at every grid step."""
    model = model or vehicle_ekf_model(theta, data.dt, cfg, substeps)
    s = EkfState(x0, P0)
    out = np.empty((len(data), NX))
    for j in range(len(data)):
        s = ekf_update(s, data.u[j], data.frame(j), model, R)
        out[j] = s.x
        s = ekf_predict(s, data.u[j], model, Q)
    return out


def _warm_states(data: Dataset, cfg: SysIdConfig) -> np.ndarray:
    if cfg.warm_start == "provided":
        if cfg.provided_states is None:
            raise ValueError("warm start 'provided' needs provided_states")
        return np.asarray(cfg.provided_states, dtype=float).reshape(len(data), NX)
    if cfg.warm_start == "cold":
        X = [np.asarray(cfg.x0_prior, float)]
        for j in range(len(data) - 1):
            X.append(discrete_step(X[-1], data.u[j], None, cfg.prior, data.dt, cfg.drive, cfg.substeps))
        return np.array(X)
    if cfg.warm_start == "prior-ekf":
        return ekf_states(data, cfg.prior, cfg.x0_prior, np.diag(np.asarray(cfg.x0_std) ** 2),
                          np.diag(np.asarray(cfg.process_std) ** 2), np.diag(np.asarray(cfg.measurement_std) ** 2),
                          cfg.drive, cfg.substeps)
    raise ValueError(f"unknown warm-start mode {cfg.warm_start!r}")


def identify(data: Dataset, cfg: SysIdConfig, require_convergence: bool = False) -> SysIdResult:
    """Jointly estimate states, noise and free parameters over the whole dataset.

    With ``cfg.n_starts > 1`` the first start is the prior and the others
    draw the free parameters inside their boxes; the lowest-cost converged
    solve wins (the lowest cost overall if none converged).
    """
    if data.n_bs != cfg.prior.n_bs:
        raise ValueError("dataset and prior disagree on the number of stations")
    if cfg.n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    lay = _Layout(data, cfg)
    prob = _build_problem(data, cfg, lay)
    Xs = _warm_states(data, cfg)
    lo, hi = np.asarray(cfg.theta_lower)[lay.free], np.asarray(cfg.theta_upper)[lay.free]
    rng = np.random.Generator(np.random.Philox(cfg.start_seed))
    best = None
    for k in range(cfg.n_starts):
        th0 = np.clip(lay.prior[lay.free], lo, hi) if k == 0 else rng.uniform(lo, hi)
        X0 = np.hstack([Xs, np.tile(th0 / lay.scale, (len(data), 1))])
        P = lay.model_rows(X0)
        V0 = np.zeros((len(data), NX))
        V0[:-1] = Xs[1:] - discrete_step(Xs[:-1], data.u[:-1], None, P[:-1], data.dt, cfg.drive, cfg.substeps)
        rep = solve_shooting(prob, prob.join(X0, V0), cfg.solver)
        if best is None or (rep.converged, -rep.cost) > (best.converged, -best.cost):
            best = rep
    rep = best
    X, V = prob.split(rep.x)
    theta_vec = lay.base.copy()
    theta_vec[lay.free] = X[0, NX:] * lay.scale
    theta = ParamSet.from_vector(theta_vec, data.n_bs)
    e, _, _, _ = _grouped_measurements(data.y, data.mask, X, data.u, lay, cfg.drive)
    res = SysIdResult(theta, X[:, :NX].copy(), V[:-1].copy(), e, rep.cost, rep)
    if require_convergence and not rep.converged:
        raise NotConverged(f"identification stopped with status {rep.status}", rep)
    return res


def cost_terms(result: SysIdResult, cfg: SysIdConfig) -> dict:
    """The parameter-prior, initial-state and noise terms of the objective."""
    free = cfg.free
    dth = (result.theta.to_vector() - cfg.prior.to_vector())[free] / np.asarray(cfg.theta_std)[free]
    dx = (result.states[0] - cfg.x0_prior) / np.asarray(cfg.x0_std)
    w = result.process_noise / np.asarray(cfg.process_std)
    v = result.measurement_noise / np.asarray(cfg.measurement_std)
    return {"theta": float(dth @ dth), "x0": float(dx @ dx), "noise": float(np.sum(w * w) + np.sum(v * v))}


def open_loop_predict(theta: ParamSet, data: Dataset, M: int, j, x_init, substeps: int = 4,
                      cfg: DriveConfig = DriveConfig()) -> np.ndarray:
    """Roll the model with logged inputs and zero noise for ``M`` steps.

    ``j`` and ``x_init`` may be arrays of start indices and matching initial
    states, giving predictions of shape ``(n_starts, M + 1, 6)``.
    """
    j = np.asarray(j, dtype=int)
    if np.any(j + M > len(data) - 1):
        raise ValueError("prediction horizon runs past the end of the dataset")
    X = np.asarray(x_init, dtype=float).reshape(j.shape + (NX,))
    out = [X]
    p = theta.model.to_vector()
    for k in range(M):
        X = discrete_step(X, data.u[j + k], None, p, data.dt, cfg, substeps)
        out.append(X)
    return np.stack(out, axis=-2)


def prediction_rmse(predictions, truth) -> float:
    """Root-mean-square planar position error over all supplied samples [m]."""
    p = np.asarray(predictions, dtype=float)[..., :2]
    g = np.asarray(truth, dtype=float)[..., :2]
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=-1))))


def openloop_rmse(theta: ParamSet, data: Dataset, x_init, M: int, stride: int = 1, substeps: int = 4) -> float:
    """Prediction RMSE over starts ``0, stride, ... <= L - M - 1`` against ``data.truth``.

    ``x_init`` holds one initial state per grid step (e.g. estimator output).
    """
    if data.truth is None:
        raise ValueError("ground truth is required")
    starts = np.arange(0, len(data) - M, stride)
    pred = open_loop_predict(theta, data, M, starts, np.asarray(x_init)[starts], substeps)
    truth = data.truth[starts[:, None] + np.arange(M + 1)]
    return prediction_rmse(pred[:, 1:], truth[:, 1:])
