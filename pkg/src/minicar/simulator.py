"""Deterministic multi-rate closed-loop simulation.

Everything runs on a base grid whose period divides the period of every
sensor, estimator, controller and low-level loop. At each base tick the
order is: estimator, controller, low-level loop, sensors (seeing the input
applied from this tick on), then the ground truth advances by one base step.

The estimator consumes ``(u_{k-1}, y_{k-1})`` at its tick ``k``: ``u_{k-1}``
is the mean input applied over ``[tau_{k-1}, tau_k)`` and ``y_{k-1}`` is
assembled from the sensor samples nearest to ``tau_{k-1}`` within half an
estimator period, all of which exist by ``tau_k``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NX, discrete_step
from .mpcc import Track, contouring_errors, project_to_track
from .params import DriveConfig, NoiseLevels, ParamSet
from .sensors import MeasurementFrame, channel_groups, group_mask, n_outputs, output_model
from .sysid import Dataset

GROUPS = ("imu", "we", "lh")


class ConfigError(ValueError):
    """Inconsistent simulation configuration."""


@dataclass(frozen=True)
class DropoutWindow:
    t_start: float
    t_end: float
    group: str = "lh"

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"unknown channel group {self.group!r}")
        if not self.t_end > self.t_start:
            raise ConfigError("dropout window must have positive length")

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


# blinding durations of the reference experiment [s]; max 1.127, mean 0.753
REFERENCE_DROPOUT_DURATIONS = (1.127, 0.5, 0.632)


def reference_dropout_windows(starts=(0.43, 1.7, 2.4), durations=REFERENCE_DROPOUT_DURATIONS, group: str = "lh"):
    return [DropoutWindow(float(s), float(s + d), group) for s, d in zip(starts, durations)]


def inject_dropout(frame: MeasurementFrame, windows, t: float | None = None, n_bs: int = 1) -> MeasurementFrame:
    """Mask every channel group whose dropout window contains ``t`` (default: the frame time)."""
    t = frame.t if t is None else t
    groups = {w.group for w in windows if w.active(t)}
    if not groups:
        return frame
    return frame.masked(group_mask(n_bs, groups))


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float = 0.0
    i_max: float = 1.0             # anti-windup clamp on the integral term


@dataclass(frozen=True)
class SimConfig:
    theta_true: ParamSet
    x0: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    duration: float = 10.0
    base_rate: float = 1500.0
    imu_rate: float = 250.0
    we_rate: float = 250.0
    lh_rate: float = 50.0
    estimator_rate: float = 60.0
    controller_rate: float = 30.0
    low_level_rate: float = 250.0
    noise: NoiseLevels = field(default_factory=NoiseLevels)
    process_noise: bool = True
    dropout: tuple = ()
    seed: int = 0
    u_lower: tuple[float, float] = (-0.35, -0.2)
    u_upper: tuple[float, float] = (0.35, 1.0)
    velocity_pid: PidGains = PidGains(kp=0.6, ki=1.5, i_max=0.5)
    extra_damping: float = 0.0     # unmodeled linear damping on the velocities [1/s]
    stop_after_laps: int | None = None
    drive: DriveConfig = field(default_factory=DriveConfig)

    def __post_init__(self):
        object.__setattr__(self, "dropout", tuple(self.dropout))
        if self.duration <= 0 or self.base_rate <= 0:
            raise ConfigError("duration and base rate must be positive")
        for name in ("imu_rate", "we_rate", "lh_rate", "estimator_rate", "controller_rate", "low_level_rate"):
            self.divisor(name)
        if len(self.x0) != NX:
            raise ConfigError("x0 needs six states")

    def divisor(self, name: str) -> int:
        """Base ticks per period of the named rate."""
        rate = getattr(self, name)
        if not rate > 0:
            raise ConfigError(f"{name} must be positive")
        d = self.base_rate / rate
        if abs(d - round(d)) > 1e-9 * max(d, 1.0) or round(d) < 1:
            raise ConfigError(f"{name} = {rate} Hz does not divide the {self.base_rate} Hz base grid")
        return int(round(d))

    @property
    def base_dt(self) -> float:
        return 1.0 / self.base_rate

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.base_rate))


@dataclass
class LowLevelState:
    integral: float = 0.0
    last_error: float | None = None
    command: tuple[float, float] = (0.0, 0.0)
    mode: str = "torque"


def velocity_feedforward(v_ref: float, theta: ParamSet) -> float:
    """Torque balancing friction at constant speed ``v_ref`` on a straight line."""
    p = theta.model
    v = max(v_ref, 0.0)
    drag = p.C_d0 + p.C_d1 * v + p.C_d2 * v * v if v > 0 else 0.0
    return drag / max(p.C_m1 - p.C_m2 * v, 1e-6)


def wheel_speed_estimate(we, r: float) -> float:
    """Longitudinal speed from the rear wheel rates ``[fl, fr, rl, rr]``."""
    return r * (we[2] + we[3]) / 2.0


def low_level_step(state: LowLevelState, command, feedback, dt: float, theta: ParamSet,
                   gains: PidGains, u_lower, u_upper):
    """One low-level update; returns the applied ``(delta, T)``.

    ``command`` is ``(delta, T)`` in torque mode or ``(delta, v_ref)`` in
    velocity mode, where a PID on ``v_ref - v_hat`` with ``v_hat`` from the
    rear encoders adds to a friction feedforward. Steering is passed through.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state.command = (float(command[0]), float(command[1]))
    delta = float(np.clip(command[0], u_lower[0], u_upper[0]))
    if state.mode == "torque":
        return delta, float(np.clip(command[1], u_lower[1], u_upper[1]))
    v_ref = float(command[1])
    err = v_ref - wheel_speed_estimate(feedback, theta.encoder.r)
    deriv = 0.0 if state.last_error is None else (err - state.last_error) / dt
    state.last_error = err
    state.integral = float(np.clip(state.integral + gains.ki * err * dt, -gains.i_max, gains.i_max))
    T = velocity_feedforward(v_ref, theta) + gains.kp * err + state.integral + gains.kd * deriv
    return delta, float(np.clip(T, u_lower[1], u_upper[1]))


# --- sample store and frame assembly -------------------------------------

class SampleStore:
    """Append-only per-group sensor samples."""

    def __init__(self, n_bs: int):
        self.n_bs = n_bs
        self.slices = channel_groups(n_bs)
        self.t = {g: [] for g in GROUPS}
        self.y = {g: [] for g in GROUPS}
        self.valid = {g: [] for g in GROUPS}

    def add(self, group: str, t: float, y, valid):
        self.t[group].append(t)
        self.y[group].append(np.asarray(y, dtype=float))
        self.valid[group].append(np.asarray(valid, dtype=bool))

    def nearest(self, group: str, tau: float, half: float):
        """Index of the sample nearest to ``tau`` in ``(tau - half, tau + half]``, or None."""
        ts = self.t[group]
        j = bisect.bisect_right(ts, tau + 1e-12) - 1        # last sample at or before tau
        best = None
        for c in (j, j + 1):
            if 0 <= c < len(ts) and tau - half + 1e-12 < ts[c] <= tau + half + 1e-12:
                # ties go to the earlier sample
                if best is None or abs(ts[c] - tau) < abs(ts[best] - tau) - 1e-12:
                    best = c
        return best

    def frame(self, tau: float, period: float) -> MeasurementFrame:
        ny = n_outputs(self.n_bs)
        y = np.zeros(ny)
        mask = np.zeros(ny, dtype=bool)
        for g in GROUPS:
            j = self.nearest(g, tau, period / 2.0)
            if j is not None:
                sl = self.slices[g]
                y[sl] = self.y[g][j]
                mask[sl] = self.valid[g][j]
        return MeasurementFrame(tau, np.where(mask, y, 0.0), mask)

    def arrays(self, group: str):
        n = self.slices[group].stop - self.slices[group].start
        if not self.t[group]:
            return np.zeros(0), np.zeros((0, n)), np.zeros((0, n), bool)
        return np.array(self.t[group]), np.array(self.y[group]), np.array(self.valid[group])


@dataclass(eq=False)
class SimLog:
    t: np.ndarray                      # base-grid times, length n + 1
    truth: np.ndarray                  # (n + 1, 6)
    applied: np.ndarray                # (n, 2) input held over [t_k, t_k+1)
    samples: SampleStore
    estimates_t: np.ndarray
    estimates: np.ndarray
    commands: list = field(default_factory=list)     # (t, command)
    plans: list = field(default_factory=list)        # (t, planned states)
    events: list = field(default_factory=list)       # (t, kind, info)
    laps: int = 0
    max_corridor_excess: float = -np.inf             # max of |eps_c| - half width along the truth
    n_bs: int = 1
    dropout: tuple = ()

    @property
    def frames(self) -> list[MeasurementFrame]:
        """One frame per base tick at which any sensor fired."""
        by_t = {}
        for g in GROUPS:
            sl = self.samples.slices[g]
            for t, y, v in zip(self.samples.t[g], self.samples.y[g], self.samples.valid[g]):
                rec = by_t.setdefault(t, (np.zeros(n_outputs(self.n_bs)), np.zeros(n_outputs(self.n_bs), bool)))
                rec[0][sl] = y
                rec[1][sl] = v
        return [MeasurementFrame(t, np.where(m, y, 0.0), m) for t, (y, m) in sorted(by_t.items())]

    def estimate_errors(self) -> np.ndarray:
        """Estimate minus truth at each estimator tick."""
        idx = np.rint(self.estimates_t * (len(self.t) - 1) / max(self.t[-1], 1e-12)).astype(int)
        return self.estimates - self.truth[idx]

    def position_errors(self) -> np.ndarray:
        e = self.estimate_errors()
        return np.hypot(e[:, 0], e[:, 1])

    def dropout_mask(self, times, group: str = "lh") -> np.ndarray:
        out = np.zeros(len(times), dtype=bool)
        for w in self.dropout:
            if w.group == group:
                out |= (times >= w.t_start) & (times < w.t_end)
        return out


def _mean_input(applied, start: int, stop: int) -> np.ndarray:
    return applied[start:stop].mean(axis=0)


def run_closed_loop(cfg: SimConfig, controller=None, estimator=None, track: Track | None = None) -> SimLog:
    """Simulate the car with the given controller and estimator.

    ``controller.step(x, t)`` returns a command and ``controller.mode`` is
    ``"torque"`` or ``"velocity"``; without a controller the inputs are zero.
    ``estimator.step(u, frame)`` returns the current state estimate and
    ``estimator.estimate`` holds the initial guess. Without an estimator the
    controller sees the true state.
    """
    theta = cfg.theta_true
    n_bs = theta.n_bs
    dt = cfg.base_dt
    div = {name: cfg.divisor(name) for name in
           ("imu_rate", "we_rate", "lh_rate", "estimator_rate", "controller_rate", "low_level_rate")}
    est_period = div["estimator_rate"] * dt
    n = cfg.n_ticks
    slices = channel_groups(n_bs)

    ss = np.random.SeedSequence(cfg.seed)
    rng_proc, rng_meas = (np.random.Generator(np.random.Philox(s)) for s in ss.spawn(2))
    proc_std = cfg.noise.process_step_std(dt) if cfg.process_noise else np.zeros(NX)
    meas_std = cfg.noise.measurement_std(n_bs)
    sensor_div = {"imu": div["imu_rate"], "we": div["we_rate"], "lh": div["lh_rate"]}

    x = np.asarray(cfg.x0, dtype=float).copy()
    T_log = np.arange(n + 1) * dt
    X = np.empty((n + 1, NX))
    U = np.zeros((n, 2))
    store = SampleStore(n_bs)
    est_t, est_x = [], []
    commands, plans, events = [], [], []
    ll = LowLevelState(mode=getattr(controller, "mode", "torque"))
    command = (0.0, 0.0)
    u = np.zeros(2)
    last_we = np.zeros(4)
    x_hat = None
    dropping = {w: False for w in cfg.dropout}

    progress = s_prev = None
    laps = 0
    excess = -np.inf
    if track is not None:
        s_prev = project_to_track(x[:2], track)
        progress = 0.0

    stop = n
    for k in range(n):
        t = k * dt
        X[k] = x
        for w in cfg.dropout:
            on = w.active(t)
            if on != dropping[w]:
                events.append((t, "dropout_on" if on else "dropout_off", w.group))
                dropping[w] = on

        if estimator is not None and k % div["estimator_rate"] == 0:
            m = k // div["estimator_rate"]
            if m == 0:
                x_hat = np.asarray(estimator.estimate, dtype=float).copy()
            else:
                u_prev = _mean_input(U, k - div["estimator_rate"], k)
                frame = store.frame((m - 1) * est_period, est_period)
                x_hat = np.asarray(estimator.step(u_prev, frame), dtype=float).copy()
            est_t.append(t)
            est_x.append(x_hat)

        new_command = False
        if controller is not None and k % div["controller_rate"] == 0:
            state = x_hat if x_hat is not None else x
            command = tuple(float(c) for c in controller.step(state.copy(), t))
            commands.append((t, command))
            new_command = True
            last = getattr(controller, "last", None)
            if last is not None and hasattr(last, "states"):
                plans.append((t, np.array(last.states)))

        # passthrough commands take effect at once; the speed loop runs at its own rate
        if (ll.mode == "torque" and new_command) or k % div["low_level_rate"] == 0:
            u = np.array(low_level_step(ll, command, last_we, div["low_level_rate"] * dt, theta,
                                        cfg.velocity_pid, cfg.u_lower, cfg.u_upper))
        U[k] = u

        fired = [g for g in GROUPS if k % sensor_div[g] == 0]
        if fired:
            y_all, valid_all = output_model(x, u, theta, cfg.drive)
            blind = {w.group for w in cfg.dropout if w.active(t)}
            for g in fired:
                sl = slices[g]
                noise = meas_std[sl] * rng_meas.standard_normal(sl.stop - sl.start)
                valid = valid_all[sl] & (g not in blind)
                store.add(g, t, np.where(valid_all[sl], y_all[sl] + noise, 0.0), valid)
                if g == "we":
                    last_we = y_all[sl] + noise

        w_proc = proc_std * rng_proc.standard_normal(NX)
        x = discrete_step(x, u, w_proc, theta.model, dt, cfg.drive)
        if cfg.extra_damping:
            x[3:6] -= cfg.extra_damping * dt * x[3:6]

        # lap and corridor bookkeeping at the low-level rate
        if track is not None and (k + 1) % div["low_level_rate"] == 0:
            s_new = project_to_track(x[:2], track, s_prev)
            ds = s_new - s_prev
            if track.closed:
                ds = (ds + track.length / 2) % track.length - track.length / 2
            progress += ds
            s_prev = s_new
            eps_c = contouring_errors(np.concatenate([x, [s_new]]), track)[1]
            excess = max(excess, abs(eps_c) - float(track.half_width(s_new)))
            if progress >= (laps + 1) * track.length:
                laps += 1
                events.append(((k + 1) * dt, "lap", laps))
                if cfg.stop_after_laps is not None and laps >= cfg.stop_after_laps:
                    stop = k + 1
                    break
    X[stop] = x
    log = SimLog(T_log[:stop + 1], X[:stop + 1], U[:stop], store,
                 np.array(est_t), np.array(est_x).reshape(-1, NX), commands, plans, events,
                 laps, excess, n_bs, cfg.dropout)
    return log


# --- offline data --------------------------------------------------------

def log_to_dataset(log: SimLog, rate: float) -> Dataset:
    """Resample a log onto a uniform grid at ``rate`` with the estimator frame rule.

    Inputs are averaged over each grid period, measurements are the samples
    nearest to each grid time within half a period; the last grid time with
    a full input period is kept.
    """
    dt_base = log.t[1] - log.t[0]
    d = int(round(1.0 / (rate * dt_base)))
    if abs(d * rate * dt_base - 1.0) > 1e-9:
        raise ConfigError(f"{rate} Hz does not divide the log's base grid")
    period = d * dt_base
    L = len(log.applied) // d
    t = np.arange(L) * period
    u = np.array([_mean_input(log.applied, j * d, (j + 1) * d) for j in range(L)])
    frames = [log.samples.frame(tj, period) for tj in t]
    truth = log.truth[np.arange(L) * d]
    return Dataset(t, u, np.array([f.y for f in frames]), np.array([f.mask for f in frames]),
                   period, log.n_bs, truth)


class PathFollower:
    """Pure-pursuit steering with a proportional speed loop and random dither.

    Used to excite the car for identification and estimation datasets.
    """

    mode = "torque"

    def __init__(self, track: Track, theta: ParamSet, v_ref: float = 1.2, lookahead: float = 0.35,
                 k_v: float = 0.8, dither=(0.05, 0.08), seed: int = 0, u_lower=(-0.35, -0.2),
                 u_upper=(0.35, 1.0), v_profile=None):
        self.track = track
        self.theta = theta
        self.v_ref = v_ref
        self.lookahead = lookahead
        self.k_v = k_v
        self.dither = np.asarray(dither, dtype=float)
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
        self.u_lower, self.u_upper = u_lower, u_upper
        self.v_profile = v_profile
        self.s = None

    def step(self, x, t: float = 0.0):
        x = np.asarray(x, dtype=float)
        self.s = project_to_track(x[:2], self.track, self.s)
        target = self.track.position(self.track.wrap(self.s + self.lookahead))
        d = target - x[:2]
        alpha = np.arctan2(d[1], d[0]) - x[2]
        L = self.theta.model.l_f + self.theta.model.l_r
        delta = np.arctan2(2.0 * L * np.sin(alpha), max(np.hypot(*d), 1e-6))
        v_ref = self.v_ref if self.v_profile is None else float(self.v_profile(t))
        T = velocity_feedforward(v_ref, self.theta) + self.k_v * (v_ref - x[3])
        u = np.array([delta, T]) + self.dither * self.rng.uniform(-1.0, 1.0, 2)
        return np.clip(u, self.u_lower, self.u_upper)


def simulate_dataset(theta: ParamSet, track: Track, duration: float, rate: float, seed: int = 0,
                     noise: NoiseLevels = NoiseLevels(), v_ref: float = 1.2, dither=(0.05, 0.08),
                     x0=None, v_profile=None, **sim_kw):
    """Drive the path follower on the true state and return ``(dataset, log)``.

    The controller runs at ``rate`` so inputs are constant on the dataset grid.
    """
    if x0 is None:
        s0 = 0.0
        p = track.position(s0)
        x0 = (float(p[0]), float(p[1]), float(track.heading(s0)), 0.5 * v_ref, 0.0, 0.0)
    cfg = SimConfig(theta_true=theta, x0=tuple(x0), duration=duration, noise=noise, seed=seed,
                    controller_rate=rate, **sim_kw)
    ctrl = PathFollower(track, theta, v_ref=v_ref, dither=dither, seed=seed, v_profile=v_profile)
    log = run_closed_loop(cfg, ctrl, None, track)
    return log_to_dataset(log, rate), log
