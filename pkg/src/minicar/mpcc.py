"""Model predictive contouring control on an arc-length parameterised track.

The vehicle state is augmented with path progress ``s`` (``s' = v_s``) and the
input with the virtual progress speed ``v_s``. Lag and contour errors are
evaluated exactly on the spline centreline and linearised by the
Gauss-Newton SQP at every iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .dynamics import NX, discrete_step, dynamics_jacobians
from .estimation import SqrtWeight
from .nlp import ShootingOptions, ShootingProblem, SolveReport, solve_shooting
from .params import DriveConfig, ParamSet


# --- track ---------------------------------------------------------------

class Track:
    """Centreline with half-widths, re-parameterised by arc length.

    Closed tracks are periodic in ``s`` with period :attr:`length`.
    """

    def __init__(self, x, y, half_width, closed: bool = True, name: str = "track"):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), x.shape).copy()
        if x.shape != y.shape or x.ndim != 1 or len(x) < 10:
            raise ValueError("a track needs at least 10 centreline samples")
        if np.any(hw <= 0):
            raise ValueError("half-widths must be positive")
        if closed and np.hypot(x[-1] - x[0], y[-1] - y[0]) > 1e-6:
            raise ValueError("closed track must end where it starts")
        chord = np.hypot(np.diff(x), np.diff(y))
        if np.any(chord <= 0):
            raise ValueError("arc length must be strictly increasing")
        self.name = name
        self.closed = closed
        self.samples = np.column_stack([x, y, hw])
        bc = "periodic" if closed else "natural"
        u = np.concatenate([[0.0], np.cumsum(chord)])
        sx = CubicSpline(u, x, bc_type=bc)
        sy = CubicSpline(u, y, bc_type=bc)
        # true arc length of the chord-parameterised spline
        uu = np.linspace(0.0, u[-1], 40 * len(u) + 1)
        speed = np.hypot(sx(uu, 1), sy(uu, 1))
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(uu))])
        self.length = float(arc[-1])
        self.s_samples = np.interp(u, uu, arc)
        n = max(200, 4 * len(u))
        s_new = np.linspace(0.0, self.length, n + 1)
        u_new = np.interp(s_new, arc, uu)
        px, py = sx(u_new), sy(u_new)
        if closed:
            px[-1], py[-1] = px[0], py[0]
        ext = "periodic" if closed else True
        self._x = CubicSpline(s_new, px, bc_type=bc, extrapolate=ext)
        self._y = CubicSpline(s_new, py, bc_type=bc, extrapolate=ext)
        self._s_hw = self.s_samples
        self._hw = hw
        # dense lookup table for projection
        self._s_dense = np.linspace(0.0, self.length, max(1000, int(self.length / 0.005)) + 1)[:-1 if closed else None]
        self._p_dense = np.column_stack([self._x(self._s_dense), self._y(self._s_dense)])

    # geometry
    def wrap(self, s):
        s = np.asarray(s, dtype=float)
        return np.mod(s, self.length) if self.closed else np.clip(s, 0.0, self.length)

    def position(self, s) -> np.ndarray:
        s = self.wrap(s)
        return np.stack([self._x(s), self._y(s)], axis=-1)

    def _derivs(self, s):
        s = self.wrap(s)
        d1 = np.stack([self._x(s, 1), self._y(s, 1)], axis=-1)
        d2 = np.stack([self._x(s, 2), self._y(s, 2)], axis=-1)
        return d1, d2

    def tangent(self, s) -> np.ndarray:
        d1, _ = self._derivs(s)
        return d1 / np.linalg.norm(d1, axis=-1, keepdims=True)

    def normal(self, s) -> np.ndarray:
        """Left-pointing unit normal."""
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def curvature(self, s) -> np.ndarray:
        d1, d2 = self._derivs(s)
        return (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / np.linalg.norm(d1, axis=-1) ** 3

    def heading(self, s) -> np.ndarray:
        t = self.tangent(s)
        return np.arctan2(t[..., 1], t[..., 0])

    def half_width(self, s) -> np.ndarray:
        s = self.wrap(s)
        if self.closed:
            return np.interp(s, self._s_hw, self._hw, period=self.length)
        return np.interp(s, self._s_hw, self._hw)

    def frame_derivatives(self, s):
        """Centreline point, tangent, normal and their s-derivatives."""
        s = np.asarray(s, dtype=float)
        c = self.position(s)
        d1, d2 = self._derivs(s)
        nrm = np.linalg.norm(d1, axis=-1, keepdims=True)
        t = d1 / nrm
        dt = (d2 - t * np.sum(t * d2, axis=-1, keepdims=True)) / nrm
        n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        dn = np.stack([-dt[..., 1], dt[..., 0]], axis=-1)
        return c, d1, t, dt, n, dn

    # I/O
    def to_records(self) -> list[dict]:
        out = [{"closed": self.closed, "name": self.name}]
        out += [{"x": float(a), "y": float(b), "half_width": float(w)} for a, b, w in self.samples]
        return out

    def save(self, path):
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "Track":
        with open(path) as fh:
            return cls.from_lines(fh.read().splitlines(), name=Path(path).stem)

    @classmethod
    def from_lines(cls, lines, name: str = "track") -> "Track":
        rows = [json.loads(ln) for ln in lines if ln.strip()]
        if not rows or "closed" not in rows[0]:
            raise ValueError("track file must start with a header carrying the closed flag")
        head, body = rows[0], rows[1:]
        return cls([r["x"] for r in body], [r["y"] for r in body], [r["half_width"] for r in body],
                   closed=bool(head["closed"]), name=head.get("name", name))


def oval_track(straight: float = 1.6, radius: float = 0.6, half_width: float = 0.25, n: int = 120) -> Track:
    """Two straights joined by semicircles, driven counter-clockwise."""
    per = 2 * straight + 2 * np.pi * radius
    s = np.linspace(0.0, per, n + 1)
    pts = []
    for v in s:
        if v < straight:
            pts.append((-straight / 2 + v, -radius))
        elif v < straight + np.pi * radius:
            a = -np.pi / 2 + (v - straight) / radius
            pts.append((straight / 2 + radius * np.cos(a), radius * np.sin(a)))
        elif v < 2 * straight + np.pi * radius:
            pts.append((straight / 2 - (v - straight - np.pi * radius), radius))
        else:
            a = np.pi / 2 + (v - 2 * straight - np.pi * radius) / radius
            pts.append((-straight / 2 + radius * np.cos(a), radius * np.sin(a)))
    pts = np.array(pts)
    pts[-1] = pts[0]
    return Track(pts[:, 0], pts[:, 1], half_width, closed=True, name="oval")


def bundled_track(name: str = "oval") -> Track:
    """Load one of the track files shipped with the package (``oval`` or ``test_track``)."""
    ref = resources.files("minicar") / "data" / f"{name}.jsonl"
    return Track.from_lines(ref.read_text().splitlines(), name=name)


def project_to_track(pos, track: Track, hint: float | None = None, window: float = 0.5) -> float:
    """Arc length of the closest centreline point; local search around ``hint`` if given."""
    p = np.asarray(pos, dtype=float)[:2]
    S = track._s_dense
    if hint is None:
        i = int(np.argmin(np.sum((track._p_dense - p) ** 2, axis=1)))
        s = S[i]
    else:
        h = float(track.wrap(hint))
        ds = S - h
        if track.closed:
            ds = (ds + track.length / 2) % track.length - track.length / 2
        near = np.flatnonzero(np.abs(ds) <= window)
        if near.size == 0:
            return project_to_track(p, track, None)
        i = near[int(np.argmin(np.sum((track._p_dense[near] - p) ** 2, axis=1)))]
        s = S[i]
    # Newton refinement on t(s).(p - c(s)) = 0
    step = S[1] - S[0]
    for _ in range(8):
        c, d1, t, dt, _, _ = track.frame_derivatives(s)
        g = t @ (p - c)
        dg = dt @ (p - c) - t @ d1
        if dg >= 0:
            break
        ds = -g / dg
        ds = float(np.clip(ds, -step, step))
        s = s + ds
        if abs(ds) < 1e-12:
            break
    return float(track.wrap(s))


def contouring_errors(state, track: Track):
    """Lag and contour error of an augmented state ``[x_p, y_p, ..., s]`` (``s`` last).

    ``e_l = -t.(p - c(s))`` is positive when progress leads the car and
    ``e_c = n.(p - c(s))`` is positive to the left of the centreline.
    """
    state = np.asarray(state, dtype=float)
    p = state[..., :2]
    s = state[..., -1]
    d = p - track.position(s)
    return -np.sum(track.tangent(s) * d, axis=-1), np.sum(track.normal(s) * d, axis=-1)


def _contouring_with_jacobian(p, s, track: Track):
    c, d1, t, dt, n, dn = track.frame_derivatives(s)
    d = p - c
    el = -np.sum(t * d, axis=-1)
    ec = np.sum(n * d, axis=-1)
    del_dp = -t
    dec_dp = n
    del_ds = -np.sum(dt * d, axis=-1) + np.sum(t * d1, axis=-1)
    dec_ds = np.sum(dn * d, axis=-1) - np.sum(n * d1, axis=-1)
    return el, ec, del_dp, dec_dp, del_ds, dec_ds


# --- controller ----------------------------------------------------------

@dataclass
class MpccConfig:
    N: int = 40
    dt: float = 1.0 / 30.0
    Q: np.ndarray = field(default_factory=lambda: np.diag([200.0, 20.0]))   # (lag, contour)
    Q_adv: float = 4.0
    R: np.ndarray = field(default_factory=lambda: np.diag([0.5, 0.5]))      # (delta, T)
    R_vs: float = 0.01
    R_du: np.ndarray | None = None             # optional input-rate weight, off by default
    corridor_weight: float = 5000.0
    corridor_margin: float = 0.06              # keeps the car body inside the corridor
    u_lower: tuple[float, float] = (-0.35, -0.2)
    u_upper: tuple[float, float] = (0.35, 1.0)
    vs_max: float = 4.0
    x_lower: tuple[float, ...] = (-np.inf, -np.inf, -np.inf, -0.5, -np.inf, -np.inf)
    x_upper: tuple[float, ...] = (np.inf, np.inf, np.inf, 4.0, np.inf, np.inf)
    substeps: int = 2
    # cold-start torque; a moving guess keeps the linearisation off the standstill friction jump
    guess_torque: float = 0.3
    solver: ShootingOptions = field(default_factory=lambda: ShootingOptions(max_iter=8, tol_g=1e-6, tol_c=1e-8,
                                                                            qp_max_iter=40, qp_tol=1e-9))
    drive: DriveConfig = field(default_factory=DriveConfig)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.Q_adv < 0:
            raise ValueError("progress weight must be non-negative")
        self._wq = SqrtWeight(self.Q)
        self._wr = SqrtWeight(self.R)
        self._wdu = None if self.R_du is None else SqrtWeight(self.R_du)


@dataclass
class MpccResult:
    u0: np.ndarray                  # (delta, T)
    states: np.ndarray              # (N + 1, 7): vehicle state and progress
    inputs: np.ndarray              # (N, 3): delta, T, v_s
    report: SolveReport

    @property
    def converged(self) -> bool:
        return self.report.converged


def _mpcc_problem(x0, s0, u_prev, track: Track, cfg: MpccConfig, theta: ParamSet) -> ShootingProblem:
    N = cfg.N
    du = cfg._wdu is not None
    nx = NX + 1 + (2 if du else 0)
    nv = 3
    p = theta.model.to_vector()
    iS = NX
    nr = 3 + 2 + 1 + (2 if du else 0)

    def dynamics(X, V, jac):
        xv = X[:, :NX]
        uu = V[:, :2]
        if not jac:
            xn = discrete_step(xv, uu, None, p, cfg.dt, cfg.drive, cfg.substeps)
        else:
            xn, Fx, Fu, _, _ = dynamics_jacobians(xv, uu, None, p, cfg.dt, cfg.drive, cfg.substeps)
        parts = [xn, (X[:, iS] + cfg.dt * V[:, 2])[:, None]]
        if du:
            parts.append(uu)
        F = np.hstack(parts)
        if not jac:
            return F, None, None
        A = np.zeros((N, nx, nx))
        A[:, :NX, :NX] = Fx
        A[:, iS, iS] = 1.0
        B = np.zeros((N, nx, nv))
        B[:, :NX, :2] = Fu
        B[:, iS, 2] = cfg.dt
        if du:
            B[:, NX + 1, 0] = 1.0
            B[:, NX + 2, 1] = 1.0
        return F, A, B

    def residuals(X, V, jac):
        K = N + 1
        r = np.zeros((K, nr))
        Rx = np.zeros((K, nr, nx))
        Rv = np.zeros((K, nr, nv))
        el, ec, dl_dp, dc_dp, dl_ds, dc_ds = _contouring_with_jacobian(X[:, :2], X[:, iS], track)
        E = np.stack([el, ec], axis=-1)
        J = np.zeros((K, 2, nx))
        J[:, 0, :2] = dl_dp
        J[:, 1, :2] = dc_dp
        J[:, 0, iS] = dl_ds
        J[:, 1, iS] = dc_ds
        e, Je = cfg._wq.apply(E, None, J)
        r[:, :2] = e
        Rx[:, :2] = Je
        # soft corridor: penalise |e_c| beyond the usable half-width
        lim = track.half_width(X[:, iS]) - cfg.corridor_margin
        over = np.abs(ec) - lim
        act = over > 0
        w = np.sqrt(cfg.corridor_weight)
        r[:, 2] = np.where(act, w * over, 0.0)
        Rx[:, 2, :] = np.where(act[:, None], w * np.sign(ec)[:, None] * J[:, 1, :], 0.0)
        eu, Ju = cfg._wr.apply(V[:, :2], None, np.broadcast_to(np.eye(2), (K, 2, 2)))
        r[:, 3:5] = eu
        Rv[:, 3:5, :2] = Ju
        r[:, 5] = np.sqrt(cfg.R_vs) * V[:, 2]
        Rv[:, 5, 2] = np.sqrt(cfg.R_vs)
        if du:
            ed, Jd = cfg._wdu.apply(V[:, :2] - X[:, NX + 1:NX + 3], None, np.broadcast_to(np.eye(2), (K, 2, 2)))
            r[:N, 6:8] = ed[:N]
            Rv[:N, 6:8, :2] = Jd[:N]
            Rx[:N, 6:8, NX + 1:NX + 3] = -Jd[:N]
        return r, Rx, Rv

    x_lo = np.tile(np.concatenate([cfg.x_lower, [-np.inf], [-np.inf] * (nx - NX - 1)]), (N + 1, 1))
    x_hi = np.tile(np.concatenate([cfg.x_upper, [np.inf], [np.inf] * (nx - NX - 1)]), (N + 1, 1))
    first = np.concatenate([x0, [s0]] + ([u_prev] if du else []))
    x_lo[0] = x_hi[0] = first
    v_lo = np.tile([cfg.u_lower[0], cfg.u_lower[1], 0.0], (N + 1, 1))
    v_hi = np.tile([cfg.u_upper[0], cfg.u_upper[1], cfg.vs_max], (N + 1, 1))
    v_lo[N] = v_hi[N] = 0.0
    linear = np.zeros((N + 1, nx + nv))
    linear[:, iS] = -cfg.Q_adv
    return ShootingProblem(N, nx, nv, dynamics, residuals, x_lower=x_lo, x_upper=x_hi,
                           v_lower=v_lo, v_upper=v_hi, linear=linear)


def initial_guess(x0, s0, track: Track, cfg: MpccConfig, theta: ParamSet, u=(0.0, 0.0)):
    """Roll out a constant input and assign progress from the travelled distance."""
    N = cfg.N
    X = [np.asarray(x0, dtype=float)]
    for _ in range(N):
        X.append(discrete_step(X[-1], u, None, theta, cfg.dt, cfg.drive, cfg.substeps))
    X = np.array(X)
    v = np.maximum(np.hypot(X[:, 3], X[:, 4]), 0.0)
    s = s0 + np.concatenate([[0.0], np.cumsum(v[:-1] * cfg.dt)])
    V = np.zeros((N + 1, 3))
    V[:N, :2] = u
    V[:N, 2] = np.clip(v[:-1], 0.0, cfg.vs_max)
    return np.hstack([X, s[:, None]]), V


def mpcc_step(x_hat, s_hint, track: Track, cfg: MpccConfig, theta: ParamSet, warm=None,
              u_prev=(0.0, 0.0)) -> MpccResult:
    """Solve the contouring problem from ``x_hat`` and return the first input and the plan.

    ``warm`` is an ``(X (N+1, 7), V (N+1, 3))`` guess, typically the previous
    plan shifted by one stage.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if not np.all(np.isfinite(x_hat)):
        raise ValueError("state estimate must be finite")
    s0 = project_to_track(x_hat[:2], track, s_hint)
    if s_hint is not None and track.closed:
        # keep progress continuous with the hint (no jump back at the start line)
        s0 = s_hint + ((s0 - s_hint + track.length / 2) % track.length - track.length / 2)
    du = cfg._wdu is not None
    if warm is None:
        torque = cfg.guess_torque if cfg.Q_adv > 0 else 0.0
        X0, V0 = initial_guess(x_hat, s0, track, cfg, theta, (0.0, torque))
    else:
        X0, V0 = (np.array(a, dtype=float) for a in warm)
        X0 = X0[:, :NX + 1]
        X0[:, NX] += s0 - X0[0, NX]
        X0[0, :NX] = x_hat
    u_prev = np.asarray(u_prev, dtype=float)
    if du:
        prevs = np.vstack([u_prev, V0[:-1, :2]])
        X0 = np.hstack([X0, prevs])
    prob = _mpcc_problem(x_hat, s0, u_prev, track, cfg, theta)
    lo, hi = prob.lower(), prob.upper()
    z0 = np.clip(prob.join(X0, V0), lo, hi)
    rep = solve_shooting(prob, z0, cfg.solver)
    X, V = prob.split(rep.x)
    return MpccResult(V[0, :2].copy(), X[:, :NX + 1].copy(), V[:-1].copy(), rep)


def shift_plan(res: MpccResult, cfg: MpccConfig, theta: ParamSet):
    """Previous plan advanced by one stage, with a predicted tail."""
    X, V = res.states, res.inputs
    x_last = discrete_step(X[-1, :NX], V[-1, :2], None, theta, cfg.dt, cfg.drive, cfg.substeps)
    s_last = X[-1, NX] + cfg.dt * V[-1, 2]
    Xs = np.vstack([X[1:], np.concatenate([x_last, [s_last]])])
    Vs = np.vstack([V[1:], V[-1:], np.zeros((1, 3))])
    return Xs, Vs


class MpccController:
    """Receding-horizon wrapper that keeps progress and the warm start between calls."""

    mode = "torque"

    def __init__(self, track: Track, cfg: MpccConfig, theta: ParamSet):
        self.track = track
        self.cfg = cfg
        self.theta = theta
        self.s = None
        self.warm = None
        self.u_prev = np.zeros(2)
        self.last: MpccResult | None = None
        self.failures = 0

    def step(self, x_hat, t: float = 0.0):
        res = mpcc_step(x_hat, self.s, self.track, self.cfg, self.theta, self.warm, self.u_prev)
        if not np.all(np.isfinite(res.u0)):
            # keep the previous command rather than applying garbage
            self.failures += 1
            self.warm = None
            return self.u_prev.copy()
        self.last = res
        self.s = float(res.states[0, NX])
        self.warm = shift_plan(res, self.cfg, self.theta)
        self.u_prev = res.u0.copy()
        return res.u0.copy()
