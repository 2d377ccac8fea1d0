"""Online state estimation: discounted moving horizon estimation and an EKF baseline.

Time indexing follows the estimator update: the call at grid step ``t``
receives ``(u_{t-1}, y_{t-1})`` and returns the estimate of ``x_t``. The MHE
window covers stages ``t - M_t .. t`` with measurements on all but the last
stage.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import NX, discrete_step, dynamics_jacobians
from .nlp import ShootingOptions, ShootingProblem, SolveReport, solve_shooting
from .params import DriveConfig, NoiseLevels, ParamSet
from .sensors import MeasurementFrame, angle_channels, measurement_jacobians, n_outputs, output_model, wrap_angle


class EmptyOverlap(ValueError):
    """Estimate and ground-truth streams share no time range."""


# --- weights -------------------------------------------------------------

class SqrtWeight:
    """Whitening by ``L^T`` where ``W = L L^T``, restricted to valid rows."""

    def __init__(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
            raise ValueError("weight matrix must be square and symmetric")
        self.W = W
        self.n = W.shape[0]
        self.diagonal = np.count_nonzero(W - np.diag(np.diag(W))) == 0
        if self.diagonal:
            if np.any(np.diag(W) <= 0):
                raise ValueError("weight matrix must be positive definite")
            self._d = np.sqrt(np.diag(W))
        else:
            np.linalg.cholesky(W)
        self._cache: dict[bytes, np.ndarray] = {}

    @classmethod
    def from_std(cls, std) -> "SqrtWeight":
        return cls(np.diag(1.0 / np.asarray(std, dtype=float) ** 2))

    def _factor(self, valid: np.ndarray) -> np.ndarray:
        key = valid.tobytes()
        if key not in self._cache:
            idx = np.flatnonzero(valid)
            Lt = np.zeros((self.n, self.n))
            if idx.size:
                L = np.linalg.cholesky(self.W[np.ix_(idx, idx)])
                Lt[np.ix_(idx, idx)] = L.T
            self._cache[key] = Lt
        return self._cache[key]

    def apply(self, e, valid=None, *jacs):
        """Whiten residuals ``e (K, n)`` and Jacobians ``(K, n, m)``; invalid rows become zero."""
        e = np.asarray(e, dtype=float)
        valid = np.ones(e.shape, bool) if valid is None else np.asarray(valid, bool)
        if self.diagonal:
            s = np.where(valid, self._d, 0.0)
            return (s * e,) + tuple(s[..., None] * J for J in jacs)
        K = e.shape[0]
        Lt = np.stack([self._factor(valid[k]) for k in range(K)])
        out_e = np.einsum("kij,kj->ki", Lt, np.where(valid, e, 0.0))
        return (out_e,) + tuple(np.einsum("kij,kjm->kim", Lt, np.where(valid[..., None], J, 0.0)) for J in jacs)


def measurement_residuals(Y, mask, X, U, theta: ParamSet, cfg: DriveConfig = DriveConfig(), jac: bool = True):
    """``e = y - h(x, u)`` with wrapped angle channels.

    Returns ``(e, valid, de_dx, de_dtheta)``; channels that are masked in the
    data or degenerate in the model are invalid and zeroed. Without ``jac``
    the two Jacobians are ``None``.
    """
    X = np.atleast_2d(X)
    if jac:
        y, ok, Hx, _, Hth = measurement_jacobians(X, U, theta, cfg)
    else:
        y, ok = output_model(X, np.broadcast_to(np.asarray(U, float), (X.shape[0], 2)), theta, cfg)
    valid = np.asarray(mask, bool) & ok
    e = np.asarray(Y, dtype=float) - y
    ang = angle_channels(theta.n_bs)
    e[:, ang] = wrap_angle(e[:, ang])
    e = np.where(valid, e, 0.0)
    if not jac:
        return e, valid, None, None
    return e, valid, -Hx, -Hth


# --- MHE -----------------------------------------------------------------

@dataclass
class MheConfig:
    """Tuning of the moving horizon estimator.

    ``P``, ``Q`` (6x6) and ``R`` (n_y x n_y) are weights (inverse
    covariances). Boxes default to unbounded.
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    M: int = 40
    eta: float = 0.95
    dt: float = 1.0 / 60.0
    substeps: int = 2
    x_lower: np.ndarray | None = None
    x_upper: np.ndarray | None = None
    w_lower: np.ndarray | None = None
    w_upper: np.ndarray | None = None
    solver: ShootingOptions = field(default_factory=lambda: ShootingOptions(max_iter=10, tol_g=1e-4, tol_c=1e-8))
    drive: DriveConfig = field(default_factory=DriveConfig)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("horizon M must be at least 1")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("discount eta must lie in (0, 1]")
        self._wp = SqrtWeight(self.P)
        self._wq = SqrtWeight(self.Q)
        self._wr = SqrtWeight(self.R)

    @classmethod
    def from_noise(cls, noise: NoiseLevels, n_bs: int, dt: float = 1.0 / 60.0,
                   prior_std=(0.05, 0.05, 0.05, 0.2, 0.2, 0.5), **kw) -> "MheConfig":
        P = np.diag(1.0 / np.asarray(prior_std, float) ** 2)
        Q = np.diag(1.0 / noise.process_step_std(dt) ** 2)
        R = np.diag(1.0 / noise.measurement_std(n_bs) ** 2)
        return cls(P=P, Q=Q, R=R, dt=dt, **kw)

    def scaled(self, c: float) -> "MheConfig":
        return MheConfig(c * self.P, c * self.Q, c * self.R, self.M, self.eta, self.dt, self.substeps,
                         self.x_lower, self.x_upper, self.w_lower, self.w_upper, self.solver, self.drive)


def _window_problem(U, Y, mask, anchor, theta: ParamSet, cfg: MheConfig, eta: float) -> ShootingProblem:
    """Shooting problem over ``N = len(U)`` transitions with measurements on stages ``0..N-1``."""
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    N = len(U)
    ny = Y.shape[1]
    nr = NX + NX + ny
    anchor = np.asarray(anchor, dtype=float)
    disc = np.sqrt(eta ** (N - 1 - np.arange(N)))
    prior_scale = np.sqrt(eta ** N)
    p = theta.model.to_vector()

    def dynamics(X, V, jac):
        if not jac:
            return discrete_step(X, U, V, p, cfg.dt, cfg.drive, cfg.substeps), None, None
        F, Fx, _, Fw, _ = dynamics_jacobians(X, U, V, p, cfg.dt, cfg.drive, cfg.substeps)
        return F, Fx, Fw

    def residuals(X, V, jac):
        r = np.zeros((N + 1, nr))
        if not jac:
            r[0, :NX] = prior_scale * cfg._wp.apply((X[0] - anchor)[None])[0][0]
            r[:N, NX:2 * NX] = disc[:, None] * cfg._wq.apply(V[:N])[0]
            e, valid, _, _ = measurement_residuals(Y, mask, X[:N], U, theta, cfg.drive, jac=False)
            r[:N, 2 * NX:] = disc[:, None] * cfg._wr.apply(e, valid)[0]
            return r, None, None
        Rx = np.zeros((N + 1, nr, NX))
        Rv = np.zeros((N + 1, nr, NX))
        ep, Jp = cfg._wp.apply((X[0] - anchor)[None], None, np.eye(NX)[None])
        r[0, :NX] = prior_scale * ep[0]
        Rx[0, :NX] = prior_scale * Jp[0]
        ew, Jw = cfg._wq.apply(V[:N], None, np.broadcast_to(np.eye(NX), (N, NX, NX)))
        r[:N, NX:2 * NX] = disc[:, None] * ew
        Rv[:N, NX:2 * NX] = disc[:, None, None] * Jw
        e, valid, ex, _ = measurement_residuals(Y, mask, X[:N], U, theta, cfg.drive)
        ey, Jy = cfg._wr.apply(e, valid, ex)
        r[:N, 2 * NX:] = disc[:, None] * ey
        Rx[:N, 2 * NX:] = disc[:, None, None] * Jy
        return r, Rx, Rv

    def box(a, default):
        return np.full(NX, default) if a is None else np.asarray(a, dtype=float)

    v_lo = np.tile(box(cfg.w_lower, -np.inf), (N + 1, 1))
    v_hi = np.tile(box(cfg.w_upper, np.inf), (N + 1, 1))
    v_lo[N] = v_hi[N] = 0.0
    return ShootingProblem(N, NX, NX, dynamics, residuals,
                           x_lower=box(cfg.x_lower, -np.inf), x_upper=box(cfg.x_upper, np.inf),
                           v_lower=v_lo, v_upper=v_hi)


def _rollout_guess(x0, U, theta, cfg):
    X = [np.asarray(x0, dtype=float)]
    for u in U:
        X.append(discrete_step(X[-1], u, None, theta.model.to_vector(), cfg.dt, cfg.drive, cfg.substeps))
    return np.array(X)


@dataclass
class EstimationWindow:
    """Rolling data buffer, estimate history for the prior term, and warm start."""

    M: int
    x0: np.ndarray
    inputs: deque = field(init=False)
    frames: deque = field(init=False)
    estimates: deque = field(init=False)
    t: int = 0
    warm: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.inputs = deque(maxlen=self.M)
        self.frames = deque(maxlen=self.M)
        self.estimates = deque([self.x0.copy()], maxlen=self.M)

    @property
    def length(self) -> int:
        return len(self.inputs)

    @property
    def anchor(self) -> np.ndarray:
        """Estimate made at the window start, ``x_hat_{t - M_t}``."""
        return self.estimates[-self.length] if self.length else self.estimates[-1]

    def push(self, u, frame: MeasurementFrame):
        self.inputs.append(np.asarray(u, dtype=float))
        self.frames.append(frame)
        self.t += 1


@dataclass
class MheStepReport:
    t: int
    window: int
    report: SolveReport

    @property
    def accepted_best_iterate(self) -> bool:
        return not self.report.converged


def mhe_step(win: EstimationWindow, u, frame: MeasurementFrame, cfg: MheConfig, theta: ParamSet):
    """Append ``(u_{t-1}, y_{t-1})``, solve the window problem and return ``(x_hat_t, report)``."""
    prev_len = win.length
    prev_start = win.t - prev_len
    win.push(u, frame)
    N = win.length
    start = win.t - N
    U = np.array(win.inputs)
    Y = np.array([f.y for f in win.frames])
    mask = np.array([f.mask for f in win.frames])
    anchor = win.anchor
    prob = _window_problem(U, Y, mask, anchor, theta, cfg, cfg.eta)

    if win.warm is None:
        X0 = _rollout_guess(anchor, U, theta, cfg)
        V0 = np.zeros_like(X0)
    else:
        Xp, Vp = win.warm
        shift = start - prev_start
        X_keep = Xp[shift:]
        V_keep = Vp[shift:prev_len]
        tail = _rollout_guess(X_keep[-1], U[len(X_keep) - 1:], theta, cfg)[1:]
        X0 = np.vstack([X_keep, tail])
        V0 = np.vstack([V_keep, np.zeros((N + 1 - len(V_keep), NX))])
    rep = solve_shooting(prob, prob.join(X0, V0), cfg.solver)
    X, V = prob.split(rep.x)
    if not np.all(np.isfinite(X)):
        X, V = X0, V0
    win.warm = (X.copy(), V.copy())
    x_hat = X[-1].copy()
    win.estimates.append(x_hat)
    return x_hat, MheStepReport(win.t, N, rep)


class MovingHorizonEstimator:
    """Stateful wrapper around :func:`mhe_step`."""

    def __init__(self, theta: ParamSet, cfg: MheConfig, x0):
        self.theta = theta
        self.cfg = cfg
        self.window = EstimationWindow(cfg.M, x0)
        self.estimate = np.asarray(x0, dtype=float).copy()
        self.last_report: MheStepReport | None = None

    def step(self, u, frame: MeasurementFrame) -> np.ndarray:
        self.estimate, self.last_report = mhe_step(self.window, u, frame, self.cfg, self.theta)
        return self.estimate

    @property
    def window_solution(self):
        return self.window.warm


def full_information_estimate(inputs, frames, x_prior, cfg: MheConfig, theta: ParamSet, eta: float | None = None,
                              warm_start=None) -> tuple[np.ndarray, SolveReport]:
    """Solve the window problem over all data at once; returns the state trajectory."""
    U = np.asarray(inputs, dtype=float)
    Y = np.array([f.y for f in frames])
    mask = np.array([f.mask for f in frames])
    prob = _window_problem(U, Y, mask, x_prior, theta, cfg, cfg.eta if eta is None else eta)
    if warm_start is None:
        X0 = _rollout_guess(x_prior, U, theta, cfg)
        warm_start = prob.join(X0, np.zeros_like(X0))
    rep = solve_shooting(prob, warm_start, cfg.solver)
    return prob.split(rep.x)[0], rep


# --- EKF -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EkfState:
    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "P", 0.5 * (P + P.T))


@dataclass(frozen=True)
class EkfModel:
    """Transition ``(x, u) -> (x_next, F)`` and output ``(x, u) -> (y, H, valid)`` maps."""

    transition: Callable
    output: Callable
    angle_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def vehicle_ekf_model(theta: ParamSet, dt: float, cfg: DriveConfig = DriveConfig(), substeps: int = 1) -> EkfModel:
    p = theta.model.to_vector()

    def transition(x, u):
        xn, Fx, _, _, _ = dynamics_jacobians(x, u, None, p, dt, cfg, substeps)
        return xn, Fx

    def output(x, u):
        y, ok, Hx, _, _ = measurement_jacobians(x[None], u, theta, cfg)
        return y[0], Hx[0], ok[0]

    return EkfModel(transition, output, angle_channels(theta.n_bs))


def ekf_update(s: EkfState, u, frame: MeasurementFrame, model: EkfModel, R) -> EkfState:
    """Joseph-form measurement update on the valid channels only."""
    y, H, ok = model.output(s.x, u)
    valid = np.asarray(frame.mask, bool) & ok
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return s
    e = np.asarray(frame.y, dtype=float) - y
    ang = np.asarray(model.angle_rows, dtype=int)
    e[ang] = wrap_angle(e[ang])
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Hv = H[idx]
    Rv = R[np.ix_(idx, idx)]
    S = Hv @ s.P @ Hv.T + Rv
    K = np.linalg.solve(S, Hv @ s.P).T
    x = s.x + K @ e[idx]
    IKH = np.eye(len(s.x)) - K @ Hv
    P = IKH @ s.P @ IKH.T + K @ Rv @ K.T
    return EkfState(x, P)


def ekf_predict(s: EkfState, u, model: EkfModel, Q) -> EkfState:
    xn, F = model.transition(s.x, u)
    return EkfState(xn, F @ s.P @ F.T + np.asarray(Q, dtype=float))


def ekf_step(s: EkfState, u, frame: MeasurementFrame, model: EkfModel, Q, R) -> EkfState:
    """Correct with ``y_{t-1}`` then predict with ``u_{t-1}``; same timing as :func:`mhe_step`."""
    return ekf_predict(ekf_update(s, u, frame, model, R), u, model, Q)


class ExtendedKalmanFilter:
    def __init__(self, theta: ParamSet, x0, P0, Q, R, dt: float, cfg: DriveConfig = DriveConfig(), substeps: int = 1):
        self.model = vehicle_ekf_model(theta, dt, cfg, substeps)
        self.state = EkfState(x0, P0)
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)

    @classmethod
    def from_noise(cls, theta: ParamSet, noise: NoiseLevels, x0, dt: float,
                   prior_std=(0.05, 0.05, 0.05, 0.2, 0.2, 0.5), **kw) -> "ExtendedKalmanFilter":
        P0 = np.diag(np.asarray(prior_std, float) ** 2)
        Q = np.diag(noise.process_step_std(dt) ** 2)
        R = np.diag(noise.measurement_std(theta.n_bs) ** 2)
        return cls(theta, x0, P0, Q, R, dt, **kw)

    @property
    def estimate(self) -> np.ndarray:
        return self.state.x

    def step(self, u, frame: MeasurementFrame) -> np.ndarray:
        self.state = ekf_step(self.state, u, frame, self.model, self.Q, self.R)
        return self.state.x


# --- evaluation ----------------------------------------------------------

def nearest_indices(t_query, t_ref) -> np.ndarray:
    """Index into sorted ``t_ref`` of the nearest sample to each query time."""
    t_ref = np.asarray(t_ref, dtype=float)
    t_query = np.asarray(t_query, dtype=float)
    i = np.clip(np.searchsorted(t_ref, t_query), 1, len(t_ref) - 1) if len(t_ref) > 1 else np.zeros(len(t_query), int)
    if len(t_ref) > 1:
        left = t_ref[i - 1]
        i = np.where(np.abs(t_query - left) <= np.abs(t_ref[i] - t_query), i - 1, i)
    return i


def evaluate_rmse(est_t, est_x, truth_t, truth_x, angle_columns=(2,)) -> dict:
    """Per-state RMSE and residual std, pairing each truth sample with the nearest estimate.

    Only truth samples inside the estimate time span are used.
    """
    est_t = np.asarray(est_t, dtype=float)
    truth_t = np.asarray(truth_t, dtype=float)
    est_x = np.atleast_2d(np.asarray(est_x, dtype=float))
    truth_x = np.atleast_2d(np.asarray(truth_x, dtype=float))
    if est_t.size == 0 or truth_t.size == 0:
        raise EmptyOverlap("an input stream is empty")
    inside = (truth_t >= est_t[0]) & (truth_t <= est_t[-1])
    if not np.any(inside):
        raise EmptyOverlap("estimate and ground truth do not overlap in time")
    tt = truth_t[inside]
    err = est_x[nearest_indices(tt, est_t)] - truth_x[inside]
    for c in angle_columns:
        err[:, c] = wrap_angle(err[:, c])
    return {
        "rmse": np.sqrt(np.mean(err ** 2, axis=0)),
        "std": np.std(err, axis=0),
        "n": int(len(tt)),
    }
