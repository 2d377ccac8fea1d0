"""Command-line interface.

Exit codes: 0 success, 1 experiment or solver failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datafile import NonMonotonicTime, ParseError, UnknownChannel, load_dataset, save_dataset, save_log
from .estimation import MheConfig, MovingHorizonEstimator, evaluate_rmse
from .experiments import (
    EXPERIMENTS,
    MismatchedExperiments,
    UnknownExperiment,
    STATE_LABELS,
    diff_reports,
    make_estimator,
    replay,
    run_experiment,
)
from .lh_calibration import (
    CalibrationPoint,
    StationPose,
    calibrate_station,
    perturbed_pose,
    reprojection_residuals,
    scene_grid,
    spread_order,
    synthetic_points,
)
from .mpcc import MpccConfig, MpccController, Track, bundled_track
from .nlp import NotConverged
from .params import NoiseLevels, ParamSet, default_params
from .simulator import ConfigError, SimConfig, reference_dropout_windows, run_closed_loop, simulate_dataset
from .sysid import SysIdConfig, identify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise UsageError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def build_config(path, overrides) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path}: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    for text in overrides or []:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg


def _params(path) -> ParamSet:
    if not path:
        return default_params(1)
    return ParamSet.from_dict(json.loads(Path(path).read_text()))


def _track(name_or_path) -> Track:
    p = Path(name_or_path)
    if p.suffix == ".jsonl":
        try:
            return Track.from_lines(p.read_text().splitlines(), name=p.stem)
        except (ValueError, KeyError) as e:
            raise UsageError(f"track {p}: {e}") from None
    try:
        return bundled_track(name_or_path)
    except FileNotFoundError:
        raise UsageError(f"unknown track {name_or_path!r}") from None


def _write_json(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --- commands ------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    theta = _params(args.params)
    track = _track(cfg.get("track", args.track))
    v = cfg.get("v_ref", args.v_ref)
    ds, log = simulate_dataset(theta, track, cfg.get("duration", args.duration), cfg.get("controller_rate", args.rate),
                               seed=cfg.get("seed", args.seed), v_ref=v)
    save_log(log, args.out, meta={"command": "simulate", "track": track.name})
    if args.dataset:
        save_dataset(ds, args.dataset)
    print(f"wrote {args.out} ({len(log.t) - 1} base steps, {log.laps} laps)")
    return EXIT_OK


def _load_points(path) -> list[CalibrationPoint]:
    pts = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pts.append(CalibrationPoint(rec["position"], rec["samples"]))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise ParseError(f"bad calibration record ({e})", i) from None
    return pts


def cmd_calibrate_lh(args, cfg) -> int:
    theta = _params(args.params)
    station = theta.stations[0]
    rng = np.random.Generator(np.random.Philox(args.seed))
    if args.points:
        pts = _load_points(args.points)
    else:
        grid = scene_grid()
        pos = grid[spread_order(grid)[: args.synthetic]]
        pts = synthetic_points(station, pos, rng=rng)
    init = StationPose.from_vector(args.init) if args.init else perturbed_pose(station, rng=rng)
    res = calibrate_station(pts, init, station.tilt_offsets, require_convergence=False)
    out = {
        "angles": list(res.pose.angles),
        "position": list(res.pose.position),
        "status": res.report.status,
        "angle_residual_rms": float(np.sqrt(np.mean(res.residuals ** 2))),
        "reprojection_residuals": reprojection_residuals(pts, res.pose, station.tilt_offsets).tolist(),
    }
    _write_json(out, args.out)
    return EXIT_OK if res.report.converged else EXIT_FAIL


def cmd_sysid(args, cfg) -> int:
    ds = load_dataset(args.data, args.rate)
    prior = _params(args.prior)
    free = args.free.split(",") if args.free else None
    x0 = ds.truth[0] if ds.truth is not None else np.zeros(6)
    sid = SysIdConfig.default(prior, x0, NoiseLevels(), ds.dt, free=free, rel_box=args.rel_box)
    res = identify(ds, sid)
    _write_json({**res.theta.to_dict(), "status": res.report.status, "cost": res.cost}, args.out)
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_estimate(args, cfg) -> int:
    ds = load_dataset(args.data, args.rate)
    theta = _params(args.params)
    x0 = ds.truth[0] if ds.truth is not None else np.zeros(6)
    if args.x0:
        x0 = np.array(args.x0, dtype=float)
    est = make_estimator(args.estimator, theta, NoiseLevels(), x0, ds.dt, cfg.get("mhe"))
    sensors = tuple(args.sensors.split(","))
    X, _ = replay(est, ds, sensors)
    with open(args.out, "w") as f:
        for t, x in zip(ds.t, X):
            f.write(json.dumps({"t": float(t), "x": [float(v) for v in x]}) + "\n")
    print(f"wrote {len(X)} estimates to {args.out}")
    return EXIT_OK


def cmd_race(args, cfg) -> int:
    theta = _params(args.params)
    track = _track(args.track)
    p = track.position(0.0)
    x0 = (float(p[0]), float(p[1]), float(track.heading(0.0)), 0.5, 0.0, 0.0)
    dropout = reference_dropout_windows() if args.dropout == "reference" else []
    sim = SimConfig(theta, x0=x0, duration=args.duration, seed=args.seed, dropout=dropout,
                    stop_after_laps=args.laps)
    mhe = MovingHorizonEstimator(theta, MheConfig.from_noise(sim.noise, theta.n_bs, 1.0 / sim.estimator_rate),
                                 np.array(x0))
    ctrl = MpccController(track, MpccConfig(), theta)
    log = run_closed_loop(sim, ctrl, mhe, track)
    save_log(log, args.out, meta={"command": "race", "track": track.name})
    err = log.position_errors()
    print(json.dumps({"laps": log.laps, "max_corridor_excess": log.max_corridor_excess,
                      "max_position_error": float(err.max())}))
    return EXIT_OK if log.laps >= (args.laps or 0) and log.max_corridor_excess <= 0 else EXIT_FAIL


def cmd_evaluate(args, cfg) -> int:
    ds = load_dataset(args.data, args.rate)
    if ds.truth is None:
        raise UsageError("dataset has no ground truth")
    rows = []
    for i, line in enumerate(Path(args.estimates).read_text().splitlines(), start=1):
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", i) from None
    t = np.array([r["t"] for r in rows])
    X = np.array([r["x"] for r in rows])
    ev = evaluate_rmse(t, X, ds.t, ds.truth)
    _write_json({"rmse": dict(zip(STATE_LABELS, ev["rmse"].tolist())),
                 "std": dict(zip(STATE_LABELS, ev["std"].tolist())), "n": ev["n"]}, args.out)
    return EXIT_OK


def cmd_experiment(args, cfg) -> int:
    report, timing = run_experiment(args.name, cfg)
    out = Path(args.out_dir)
    path = report.write(out)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path}")
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_diff(args, cfg) -> int:
    a = json.loads(Path(args.a).read_text())
    b = json.loads(Path(args.b).read_text())
    tols = {}
    for text in args.tol or []:
        keys, value = parse_override(text)
        tols[".".join(keys)] = float(value)
    ok, failures = diff_reports(a, b, tols, args.default_tol)
    for f in failures:
        print(f"FAIL {f}")
    print("PASS" if ok else f"{len(failures)} metric(s) differ")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="minicar", description="Small-scale car estimation and control toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--params", help="parameter set JSON (default: reference car)")
        return p

    p = common(sub.add_parser("simulate", help="drive a path follower and log sensors"))
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="also write the log resampled at --rate")
    p.add_argument("--track", default="oval")
    p.add_argument("--duration", type=float, default=20.0)
    p.add_argument("--rate", type=float, default=50.0, help="controller and dataset rate [Hz]")
    p.add_argument("--v-ref", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("calibrate-lh", help="fit a base-station pose"))
    p.add_argument("--points", help="JSONL records {position, samples}")
    p.add_argument("--synthetic", type=int, default=6, help="number of synthetic scene points")
    p.add_argument("--init", type=float, nargs=6, metavar="V", help="phi1 phi2 phi3 x y z")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate_lh)

    p = common(sub.add_parser("sysid", help="identify model parameters from a log"))
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, help="resampling rate [Hz] (default: the log's grid)")
    p.add_argument("--prior", help="prior parameter set JSON")
    p.add_argument("--free", help="comma-separated parameter names")
    p.add_argument("--rel-box", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sysid)

    p = common(sub.add_parser("estimate", help="replay a log through an estimator"))
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, default=60.0)
    p.add_argument("--estimator", choices=["mhe", "ekf"], default="mhe")
    p.add_argument("--sensors", default="lh,imu,we")
    p.add_argument("--x0", type=float, nargs=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = common(sub.add_parser("race", help="closed-loop MPCC with MHE feedback"))
    p.add_argument("--track", default="oval")
    p.add_argument("--duration", type=float, default=12.0)
    p.add_argument("--laps", type=int, default=1)
    p.add_argument("--dropout", choices=["none", "reference"], default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_race)

    p = common(sub.add_parser("evaluate", help="RMSE of an estimate log against ground truth"))
    p.add_argument("--estimates", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, default=60.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("experiment", help="run a named experiment"))
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("diff", help="compare two experiment reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tol", action="append", metavar="METRIC=TOL")
    p.add_argument("--default-tol", type=float, default=0.0)
    p.set_defaults(func=cmd_diff, config=None, set=None)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args.config, args.set)
        return args.func(args, cfg)
    except (UsageError, ParseError, NonMonotonicTime, UnknownChannel, ConfigError, MismatchedExperiments,
            UnknownExperiment, FileNotFoundError, KeyError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
