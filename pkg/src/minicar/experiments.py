"""End-to-end experiments on simulated data, their reports and report diffs.

Each experiment takes a plain config dict (defaults below, deep-merged with
user overrides) and returns an :class:`ExperimentReport` with metrics,
pass/fail checks and plot-ready two-column series. Reports contain no
wall-clock data, so equal configs give byte-identical reports; timings are
returned separately.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datafile import write_series
from .estimation import ExtendedKalmanFilter, MheConfig, MovingHorizonEstimator, evaluate_rmse
from .lh_calibration import perturbed_pose, residual_sweep
from .mpcc import MpccConfig, MpccController, bundled_track
from .params import NoiseLevels, default_params
from .sensors import MeasurementFrame, group_mask
from .simulator import (
    REFERENCE_DROPOUT_DURATIONS,
    DropoutWindow,
    SimConfig,
    log_to_dataset,
    run_closed_loop,
    simulate_dataset,
)
from .sysid import Dataset, SysIdConfig, identify, open_loop_predict, openloop_rmse

STATE_LABELS = ("x", "y", "psi", "v_x", "v_y", "omega")
STATE_UNITS = ("m", "m", "rad", "m/s", "m/s", "rad/s")


class MismatchedExperiments(ValueError):
    """Two reports of different experiments were compared."""


class UnknownExperiment(ValueError):
    pass


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    metrics: dict
    checks: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)      # name -> (x, y, header)
    tables: dict = field(default_factory=dict)

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_digest": self.config_digest,
            "config": self.config,
            "metrics": self.metrics,
            "units": self.units,
            "checks": self.checks,
            "tables": self.tables,
            "series": {name: f"{name}.txt" for name in sorted(self.series)},
        }

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, (x, y, header) in sorted(self.series.items()):
            write_series(out / f"{name}.txt", x, y, header)
        path = out / "report.json"
        path.write_text(self.to_json() + "\n")
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def diff_reports(a: dict, b: dict, tolerances: dict | None = None, default_tol: float = 0.0):
    """Compare the metrics of two report dicts.

    Returns ``(ok, failures)`` where ``failures`` lists the metrics that
    differ by more than their absolute tolerance (or differ at all, for
    non-numeric values).
    """
    if a.get("experiment") != b.get("experiment"):
        raise MismatchedExperiments(f"{a.get('experiment')!r} vs {b.get('experiment')!r}")
    tolerances = tolerances or {}
    fa, fb = flatten(a.get("metrics", {})), flatten(b.get("metrics", {}))
    failures = []
    for key in sorted(set(fa) | set(fb)):
        if key not in fa or key not in fb:
            failures.append(f"{key}: missing in one report")
            continue
        va, vb = fa[key], fb[key]
        tol = tolerances.get(key, default_tol)
        if isinstance(va, list) or isinstance(vb, list):
            va_, vb_ = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
            if va_.shape != vb_.shape or np.any(np.abs(va_ - vb_) > tol):
                failures.append(f"{key}: {va} vs {vb}")
        elif isinstance(va, (int, float)) and isinstance(vb, (int, float)) and not isinstance(va, bool):
            if abs(va - vb) > tol:
                failures.append(f"{key}: {va} vs {vb} (tol {tol})")
        elif va != vb:
            failures.append(f"{key}: {va} vs {vb}")
    return not failures, failures


# --- estimator replay ----------------------------------------------------

SENSOR_SUBSETS = (("lh",), ("lh", "imu"), ("lh", "we"), ("lh", "imu", "we"))


def make_estimator(kind: str, theta, noise: NoiseLevels, x0, dt: float, mhe: dict | None = None):
    if kind == "ekf":
        return ExtendedKalmanFilter.from_noise(theta, noise, x0, dt)
    if kind == "mhe":
        opts = dict(mhe or {})
        return MovingHorizonEstimator(theta, MheConfig.from_noise(noise, theta.n_bs, dt, **opts), x0)
    raise ValueError(f"unknown estimator {kind!r}")


def replay(estimator, data: Dataset, sensors=("lh", "imu", "we")):
    """Run an estimator over a dataset in real-time order.

    The call at grid step ``j`` receives ``(u_{j-1}, y_{j-1})`` and returns
    the estimate at ``t_j``; step 0 is the initial guess. Returns the
    estimates and per-call wall times.
    """
    keep = group_mask(data.n_bs, sensors)
    X = np.empty((len(data), 6))
    X[0] = estimator.estimate
    times = []
    for j in range(1, len(data)):
        f = data.frame(j - 1)
        frame = MeasurementFrame(f.t, f.y, f.mask & keep)
        t0 = time.perf_counter()
        X[j] = estimator.step(data.u[j - 1], frame)
        times.append(time.perf_counter() - t0)
    return X, np.array(times)


def _reference_samples(t, X, rate: float, t_end: float):
    """Ground truth sampled at ``rate`` (nearest simulated state), like an external tracker."""
    ts = np.arange(0.0, t_end + 1e-9, 1.0 / rate)
    idx = np.clip(np.rint(ts / (t[1] - t[0])).astype(int), 0, len(t) - 1)
    return t[idx], X[idx]


# --- experiments ---------------------------------------------------------

DEFAULTS = {
    "calib-residuals": {
        "seeds": 20, "seed": 0, "n_min": 3, "n_max": 10, "sigma": 3e-4, "n_samples": 50,
        "d_angle": 0.1, "d_pos": 0.2, "n_check": 6, "max_mean_residual": 0.010,
    },
    "sysid-openloop": {
        "seed": 1, "holdout_seed": 2, "track": "oval", "duration": 20.0, "rate": 50.0,
        "v_ref": 1.8, "v_amp": 0.5, "v_period": 5.0, "dither": [0.1, 0.1],
        "perturb": {"D_f": 1.3, "D_r": 0.7, "C_m1": 1.3}, "free": None, "rel_box": 1.0,
        "horizon": 2.0, "stride": 10, "max_rel_error": 0.05, "min_improvement": 2.0,
    },
    "estimator-table": {
        "seed": 5, "track": "oval", "duration": 20.0, "rate": 60.0, "controller_rate": 30.0,
        "v_ref": 1.5, "v_amp": 0.4, "v_period": 6.0, "dither": [0.06, 0.08], "reference_rate": 35.0,
        "mhe": {"M": 40, "eta": 0.95, "substeps": 2}, "max_position_rmse": 0.050,
    },
    "closed-loop-dropout": {
        "seed": 3, "track": "oval", "max_duration": 12.0, "v0": 0.5,
        "dropout_starts": [0.43, 1.7, 2.4], "min_blind_calls": 68, "dropout_durations": list(REFERENCE_DROPOUT_DURATIONS),
        "mhe": {"M": 40, "eta": 0.95, "substeps": 2}, "mpcc": {"N": 40},
        "max_position_error": 0.15, "reconverge_tol": 0.03, "reconverge_steps": 10,
    },
}


def _velocity_profile(cfg):
    v, a, T = cfg["v_ref"], cfg["v_amp"], cfg["v_period"]
    return lambda t: v + a * np.sin(2.0 * np.pi * t / T)


def calib_residuals(cfg: dict) -> ExperimentReport:
    theta = default_params(1)
    station = theta.stations[0]
    ns = list(range(cfg["n_min"], cfg["n_max"] + 1))
    means, maxes = [], []
    for k in range(cfg["seeds"]):
        seed = cfg["seed"] + k
        init = perturbed_pose(station, cfg["d_angle"], cfg["d_pos"],
                              np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1]))))
        sw = residual_sweep(station, init, ns, n_samples=cfg["n_samples"], sigma=cfg["sigma"], seed=seed)
        means.append(sw["mean"])
        maxes.append(sw["max"])
    med_mean = np.median(np.array(means), axis=0)
    med_max = np.median(np.array(maxes), axis=0)
    i6 = ns.index(cfg["n_check"])
    metrics = {
        "n_cal": ns,
        "median_mean_residual": med_mean.tolist(),
        "median_max_residual": med_max.tolist(),
        "mean_residual_at_check": float(med_mean[i6]),
    }
    checks = {
        "mean_residual_at_check": bool(med_mean[i6] <= cfg["max_mean_residual"]),
        "non_increasing": bool(np.all(np.diff(med_mean) <= 0.0)),
    }
    series = {
        "calib_mean_residual": (ns, med_mean, "n_cal mean_residual[m]"),
        "calib_max_residual": (ns, med_max, "n_cal max_residual[m]"),
    }
    units = {"median_mean_residual": "m", "median_max_residual": "m", "mean_residual_at_check": "m"}
    return ExperimentReport("calib-residuals", cfg, metrics, checks, units, series)


def sysid_openloop(cfg: dict) -> ExperimentReport:
    theta = default_params(1)
    track = bundled_track(cfg["track"])
    vp = _velocity_profile(cfg)
    common = dict(v_profile=vp, dither=tuple(cfg["dither"]))
    train, _ = simulate_dataset(theta, track, cfg["duration"], cfg["rate"], seed=cfg["seed"], **common)
    hold, _ = simulate_dataset(theta, track, cfg["duration"], cfg["rate"], seed=cfg["holdout_seed"], **common)
    m = theta.model
    prior = theta.replace_model(**{k: getattr(m, k) * f for k, f in cfg["perturb"].items()})
    sid = SysIdConfig.default(prior, train.truth[0], NoiseLevels(), train.dt, free=cfg["free"], rel_box=cfg["rel_box"])
    res = identify(train, sid)
    M = int(round(cfg["horizon"] * cfg["rate"]))
    rm_prior = openloop_rmse(prior, hold, hold.truth, M, cfg["stride"])
    rm_id = openloop_rmse(res.theta, hold, hold.truth, M, cfg["stride"])
    rm_true = openloop_rmse(theta, hold, hold.truth, M, cfg["stride"])
    rel = {k: float(getattr(res.theta.model, k) / getattr(m, k) - 1.0) for k in cfg["perturb"]}
    metrics = {
        "relative_error": rel,
        "rmse_prior": rm_prior,
        "rmse_identified": rm_id,
        "rmse_true_model": rm_true,
        "improvement": rm_prior / rm_id,
        "solver_status": res.report.status,
        "solver_iterations": int(res.report.iterations),
        "identified": {n: float(getattr(res.theta.model, n)) for n in m.__dataclass_fields__},
    }
    checks = {f"recover_{k}": bool(abs(v) <= cfg["max_rel_error"]) for k, v in rel.items()}
    checks["improvement"] = bool(rm_prior / rm_id >= cfg["min_improvement"])
    # one prediction window for trajectory overlays
    j0 = 0
    overlay = {}
    for name, th in (("prior", prior), ("identified", res.theta)):
        P = open_loop_predict(th, hold, M, j0, hold.truth[j0])
        overlay[f"openloop_{name}_xy"] = (P[:, 0], P[:, 1], "x[m] y[m]")
    overlay["openloop_truth_xy"] = (hold.truth[j0:j0 + M + 1, 0], hold.truth[j0:j0 + M + 1, 1], "x[m] y[m]")
    units = {"rmse_prior": "m", "rmse_identified": "m", "rmse_true_model": "m", "relative_error": "1", "improvement": "1"}
    return ExperimentReport("sysid-openloop", cfg, metrics, checks, units, overlay)


def _estimator_dataset(cfg: dict):
    theta = default_params(1)
    track = bundled_track(cfg["track"])
    ds, log = simulate_dataset(theta, track, cfg["duration"], cfg["controller_rate"], seed=cfg["seed"],
                               v_profile=_velocity_profile(cfg), dither=tuple(cfg["dither"]))
    return theta, log_to_dataset(log, cfg["rate"]), log


def estimator_table(cfg: dict):
    theta, ds, log = _estimator_dataset(cfg)
    noise = NoiseLevels()
    ref_t, ref_x = _reference_samples(log.t, log.truth, cfg["reference_rate"], ds.t[-1])
    rows, timing = [], {}
    for sensors in SENSOR_SUBSETS:
        for kind in ("ekf", "mhe"):
            est = make_estimator(kind, theta, noise, ds.truth[0], ds.dt, cfg["mhe"])
            X, times = replay(est, ds, sensors)
            ev = evaluate_rmse(ds.t, X, ref_t, ref_x)
            e = X[:, :2] - ds.truth[:, :2]
            rows.append({
                "estimator": kind.upper(),
                "sensors": {"lh": "lh" in sensors, "imu": "imu" in sensors, "we": "we" in sensors},
                "rmse": dict(zip(STATE_LABELS[:5], ev["rmse"][:5].tolist())),
                "std": dict(zip(STATE_LABELS[:5], ev["std"][:5].tolist())),
                "position_rmse": float(np.sqrt(np.mean(np.sum(e ** 2, axis=1)))),
            })
            timing[f"{kind}_{'+'.join(sensors)}_median_step_s"] = float(np.median(times))
    def row(kind, sensors):
        return next(r for r in rows if r["estimator"] == kind and
                    tuple(s for s in ("lh", "imu", "we") if r["sensors"][s]) == sensors)
    checks = {}
    for kind in ("EKF", "MHE"):
        a, b = row(kind, ("lh", "imu")), row(kind, ("lh", "imu", "we"))
        for s in ("v_x", "v_y"):
            checks[f"{kind.lower()}_we_reduces_{s}"] = bool(b["rmse"][s] < a["rmse"][s])
    full_mhe = row("MHE", ("lh", "imu", "we"))
    checks["mhe_all_position_rmse"] = bool(full_mhe["position_rmse"] <= cfg["max_position_rmse"])
    metrics = {"rows": {f"{r['estimator']}:{'+'.join(s for s in ('lh', 'imu', 'we') if r['sensors'][s])}":
                        {**r["rmse"], "position": r["position_rmse"]} for r in rows}}
    units = {"rows": dict(zip(STATE_LABELS[:5] + ("position",), STATE_UNITS[:5] + ("m",)))}
    rep = ExperimentReport("estimator-table", cfg, metrics, checks, units, {}, {"table": rows})
    return rep, timing


def _blind_streaks(log, period: float) -> list[int]:
    """Lengths of runs of estimator calls whose frame carries no Lighthouse channel."""
    lh = group_mask(log.n_bs, ["lh"])
    blind = []
    for m in range(1, len(log.estimates_t)):
        f = log.samples.frame((m - 1) * period, period)
        blind.append(not np.any(f.mask & lh))
    streaks, run = [], 0
    for b in blind:
        if b:
            run += 1
        elif run:
            streaks.append(run)
            run = 0
    if run:
        streaks.append(run)
    return streaks


def closed_loop_dropout(cfg: dict):
    theta = default_params(1)
    track = bundled_track(cfg["track"])
    p = track.position(0.0)
    x0 = (float(p[0]), float(p[1]), float(track.heading(0.0)), cfg["v0"], 0.0, 0.0)
    windows = [DropoutWindow(float(s), float(s + d), "lh")
               for s, d in zip(cfg["dropout_starts"], cfg["dropout_durations"])]
    sim = SimConfig(theta, x0=x0, duration=cfg["max_duration"], seed=cfg["seed"], dropout=windows, stop_after_laps=1)
    mhe_cfg = MheConfig.from_noise(sim.noise, theta.n_bs, 1.0 / sim.estimator_rate, **cfg["mhe"])
    mhe = _Timed(MovingHorizonEstimator(theta, mhe_cfg, np.array(x0)))
    ctrl = _Timed(MpccController(track, MpccConfig(**cfg["mpcc"]), theta))
    log = run_closed_loop(sim, ctrl, mhe, track)
    err = log.position_errors()
    blind = log.dropout_mask(log.estimates_t)
    period = 1.0 / sim.estimator_rate
    # steps after each window until the error is back under the tolerance
    reconv = []
    for w in windows:
        after = np.flatnonzero(log.estimates_t >= w.t_end)
        if len(after) == 0:
            continue
        ok = np.flatnonzero(err[after] <= cfg["reconverge_tol"])
        reconv.append(int(ok[0]) if len(ok) else len(after))
    streaks = _blind_streaks(log, period)
    lap_time = next((t for t, kind, _ in log.events if kind == "lap"), None)
    durations = [w.t_end - w.t_start for w in windows]
    metrics = {
        "lap_completed": log.laps >= 1,
        "lap_time": lap_time,
        "max_corridor_excess": float(log.max_corridor_excess),
        "max_position_error": float(err.max()),
        "max_position_error_blinded": float(err[blind].max()) if blind.any() else 0.0,
        "max_consecutive_blind_calls": int(max(streaks, default=0)),
        "blind_duration_max": float(max(durations, default=0.0)),
        "blind_duration_mean": float(np.mean(durations)) if durations else 0.0,
        "reconvergence_steps": reconv,
        "mpcc_unconverged_calls": int(ctrl.unconverged),
    }
    checks = {
        "lap_completed": bool(log.laps >= 1),
        "no_corridor_violation": bool(log.max_corridor_excess <= 0.0),
        "position_error_bounded": bool(err.max() <= cfg["max_position_error"]),
        "reconverges": bool(all(r <= cfg["reconverge_steps"] for r in reconv)),
        "blind_calls_reached": bool(max(streaks, default=0) >= cfg["min_blind_calls"]),
    }
    E = log.estimates
    series = {
        "truth_xy": (log.truth[::25, 0], log.truth[::25, 1], "x[m] y[m]"),
        "estimate_xy": (E[:, 0], E[:, 1], "x[m] y[m]"),
        "position_error": (log.estimates_t, err, "t[s] error[m]"),
    }
    units = {"lap_time": "s", "max_corridor_excess": "m", "max_position_error": "m",
             "max_position_error_blinded": "m", "blind_duration_max": "s", "blind_duration_mean": "s"}
    timing = {"mhe_median_step_s": mhe.median, "mpcc_median_step_s": ctrl.median}
    return ExperimentReport("closed-loop-dropout", cfg, metrics, checks, units, series), timing


class _Timed:
    """Proxy recording wall time of ``step`` calls."""

    def __init__(self, inner):
        self.inner = inner
        self.times = []
        self.unconverged = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def step(self, *args):
        t0 = time.perf_counter()
        out = self.inner.step(*args)
        self.times.append(time.perf_counter() - t0)
        last = getattr(self.inner, "last", None)
        if last is not None and hasattr(last, "report") and not last.report.converged:
            self.unconverged += 1
        return out

    @property
    def median(self) -> float:
        return float(np.median(self.times)) if self.times else 0.0


EXPERIMENTS = {
    "calib-residuals": calib_residuals,
    "sysid-openloop": sysid_openloop,
    "estimator-table": estimator_table,
    "closed-loop-dropout": closed_loop_dropout,
}


def run_experiment(name: str, overrides: dict | None = None):
    """Run an experiment; returns ``(report, timing)``."""
    if name not in EXPERIMENTS:
        raise UnknownExperiment(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    cfg = deep_merge(DEFAULTS[name], overrides or {})
    t0 = time.perf_counter()
    out = EXPERIMENTS[name](cfg)
    report, timing = out if isinstance(out, tuple) else (out, {})
    timing = {"wall_s": time.perf_counter() - t0, **timing}
    return report, timing
