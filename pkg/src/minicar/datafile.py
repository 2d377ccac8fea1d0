"""Line-delimited JSON logs and their conversion to uniform-grid datasets.

The first line is a header object; every further line is one record
``{"t": ..., "channel": ..., "values": [...]}``. Channels are ``input``
(``delta, T`` held from ``t`` on), ``imu``, ``we``, ``lh`` (all stations,
``8 * n_bs`` angles) and ``truth``. A ``null`` value marks an invalid
entry; a missing row marks a whole group as absent.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import NX
from .sensors import channel_groups, channel_names, channel_units
from .simulator import GROUPS, SampleStore, SimLog
from .sysid import Dataset

FORMAT = "minicar-log"
VERSION = 1
STATE_UNITS = ["m", "m", "rad", "m/s", "m/s", "rad/s"]


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMonotonicTime(ValueError):
    """Timestamps decrease within one channel."""


class UnknownChannel(ValueError):
    """A record names a channel the format does not define."""


def channel_spec(n_bs: int) -> dict:
    names = channel_names(n_bs)
    units = channel_units(n_bs)
    out = {"input": {"names": ["delta", "T"], "units": ["rad", "1"]}}
    for g, sl in channel_groups(n_bs).items():
        out[g] = {"names": names[sl], "units": units[sl]}
    out["truth"] = {"names": ["x", "y", "psi", "v_x", "v_y", "omega"], "units": STATE_UNITS}
    return out


@dataclass(eq=False)
class RawLog:
    """Multi-rate records as read from a file."""

    n_bs: int
    inputs: tuple[np.ndarray, np.ndarray]        # (t, (n, 2))
    samples: SampleStore
    truth: tuple[np.ndarray, np.ndarray] | None
    header: dict

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _header(n_bs: int, meta: dict | None, dt: float | None, t_end: float | None) -> dict:
    h = {"format": FORMAT, "version": VERSION, "n_bs": n_bs, "channels": channel_spec(n_bs)}
    if dt is not None:
        h["dt"] = dt
    if t_end is not None:
        h["t_end"] = float(t_end)
    if meta:
        h["meta"] = meta
    return h


def _row(t, channel, values, valid=None) -> str:
    vals = [float(v) if (valid is None or valid[i]) else None for i, v in enumerate(values)]
    return _dump({"t": float(t), "channel": channel, "values": vals})


def save_dataset(ds: Dataset, path, meta: dict | None = None):
    """Write a uniform-grid dataset; groups without any valid channel are omitted."""
    slices = channel_groups(ds.n_bs)
    with open(path, "w") as f:
        f.write(_dump(_header(ds.n_bs, meta, ds.dt, ds.t[-1] + ds.dt)) + "\n")
        for j in range(len(ds)):
            t = ds.t[j]
            f.write(_row(t, "input", ds.u[j]) + "\n")
            for g in GROUPS:
                sl = slices[g]
                if ds.mask[j, sl].any():
                    f.write(_row(t, g, ds.y[j, sl], ds.mask[j, sl]) + "\n")
            if ds.truth is not None:
                f.write(_row(t, "truth", ds.truth[j]) + "\n")


def save_log(log: SimLog, path, meta: dict | None = None, truth_every: int = 6):
    """Write a simulation log at native sensor rates.

    Inputs are written when they change, truth every ``truth_every`` base ticks.
    """
    rows = []
    prev = None
    for k, u in enumerate(log.applied):
        if prev is None or np.any(u != prev):
            rows.append((log.t[k], 0, _row(log.t[k], "input", u)))
            prev = u
    for gi, g in enumerate(GROUPS):
        for t, y, v in zip(log.samples.t[g], log.samples.y[g], log.samples.valid[g]):
            rows.append((t, 1 + gi, _row(t, g, y, v)))
    for k in range(0, len(log.t), truth_every):
        rows.append((log.t[k], 9, _row(log.t[k], "truth", log.truth[k])))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as f:
        f.write(_dump(_header(log.n_bs, meta, None, log.t[-1])) + "\n")
        for _, _, line in rows:
            f.write(line + "\n")


def read_log(path) -> RawLog:
    """Parse a log file, checking record structure and per-channel time order."""
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise ParseError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"header is not valid JSON ({e.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise ParseError(f"header must declare format {FORMAT!r}", 1)
    n_bs = header.get("n_bs")
    if not isinstance(n_bs, int) or n_bs < 0:
        raise ParseError("header needs a non-negative integer n_bs", 1)
    widths = {"input": 2, "truth": NX}
    for g, sl in channel_groups(n_bs).items():
        widths[g] = sl.stop - sl.start
    store = SampleStore(n_bs)
    inputs_t, inputs_u, truth_t, truth_x = [], [], [], []
    last_t = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", i) from None
        if not isinstance(rec, dict) or not {"t", "channel", "values"} <= rec.keys():
            raise ParseError("record needs t, channel and values", i)
        t, ch, vals = rec["t"], rec["channel"], rec["values"]
        if not isinstance(t, (int, float)) or isinstance(t, bool) or not math.isfinite(t):
            raise ParseError("timestamp must be a finite number", i)
        if ch not in widths:
            raise UnknownChannel(f"line {i}: unknown channel {ch!r}")
        if not isinstance(vals, list) or len(vals) != widths[ch]:
            raise ParseError(f"channel {ch!r} needs {widths[ch]} values", i)
        if any(v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))) for v in vals):
            raise ParseError("values must be numbers or null", i)
        if ch in last_t and t < last_t[ch]:
            raise NonMonotonicTime(f"line {i}: channel {ch!r} goes back in time ({t} < {last_t[ch]})")
        last_t[ch] = t
        valid = np.array([v is not None for v in vals])
        y = np.array([0.0 if v is None else float(v) for v in vals])
        if ch == "input":
            if not valid.all():
                raise ParseError("inputs cannot be null", i)
            inputs_t.append(float(t))
            inputs_u.append(y)
        elif ch == "truth":
            truth_t.append(float(t))
            truth_x.append(y)
        else:
            store.add(ch, float(t), y, valid)
    if not inputs_t:
        raise ParseError("log has no input records", len(lines))
    truth = (np.array(truth_t), np.array(truth_x)) if truth_t else None
    return RawLog(n_bs, (np.array(inputs_t), np.array(inputs_u)), store, truth, header)


def _held_average(t_in, u_in, t0: float, t1: float) -> np.ndarray:
    """Mean of the zero-order-hold input signal over ``[t0, t1)``."""
    i = max(int(np.searchsorted(t_in, t0 + 1e-12, side="right")) - 1, 0)
    segs = []
    t = t0
    while t < t1 - 1e-12:
        nxt = t_in[i + 1] if i + 1 < len(t_in) else np.inf
        seg_end = min(t1, nxt)
        if seg_end > t + 1e-12:
            segs.append((seg_end - t, u_in[i]))
            t = seg_end
        i += 1
    if len(segs) == 1:
        return u_in[i - 1].copy()
    return sum(w * u for w, u in segs) / (t1 - t0)


def _end_time(raw: RawLog) -> float:
    if "t_end" in raw.header:
        return float(raw.header["t_end"])
    ends = [raw.inputs[0][-1]]
    for g in GROUPS:
        if raw.samples.t[g]:
            ends.append(raw.samples.t[g][-1])
    if raw.truth is not None:
        ends.append(raw.truth[0][-1])
    return max(ends)


def to_dataset(raw: RawLog, rate: float | None = None) -> Dataset:
    """Resample onto a uniform grid starting at the first input.

    Grid times need a full period before the log end. Inputs are the mean
    of the held signal over each period; measurements the sample nearest to
    each grid time within half a period, else masked; truth the nearest
    truth sample. Without ``rate`` the log must already be on the grid
    declared in its header, whose input times are then used as is.
    """
    t_in, u_in = raw.inputs
    if rate is None:
        if "dt" not in raw.header:
            raise ValueError("log has no grid; pass a resampling rate")
        period = float(raw.header["dt"])
        t, u = t_in, u_in
    else:
        if not rate > 0:
            raise ValueError("rate must be positive")
        period = 1.0 / rate
        L = int(np.floor((_end_time(raw) - t_in[0]) / period + 1e-9))
        if L < 2:
            raise ValueError("log is shorter than two grid periods")
        t = t_in[0] + np.arange(L) * period
        u = np.array([_held_average(t_in, u_in, tj, tj + period) for tj in t])
    frames = [raw.samples.frame(tj, period) for tj in t]
    truth = None
    if raw.truth is not None:
        tt, xx = raw.truth
        idx = np.clip(np.searchsorted(tt, t), 1, max(len(tt) - 1, 1))
        idx = np.where(np.abs(tt[idx - 1] - t) <= np.abs(tt[np.minimum(idx, len(tt) - 1)] - t), idx - 1, idx)
        truth = xx[np.minimum(idx, len(tt) - 1)]
    return Dataset(t, u, np.array([f.y for f in frames]), np.array([f.mask for f in frames]),
                   period, raw.n_bs, truth)


def load_dataset(path, rate: float | None = None) -> Dataset:
    """Read a log and put it on a uniform grid (the header's grid unless ``rate`` is given)."""
    return to_dataset(read_log(path), rate)


def load_csv(path, mapping: dict, out_path=None) -> RawLog:
    """Ingest a tabular export through a column mapping.

    ``mapping = {"time": col, "n_bs": 1, "channels": {"imu": [cols...], ...}}``;
    a channel is recorded on rows where all its columns are non-empty.
    Writes the converted log to ``out_path`` when given.
    """
    n_bs = int(mapping.get("n_bs", 1))
    chans = mapping["channels"]
    for ch in chans:
        if ch not in ("input", "truth", *GROUPS):
            raise UnknownChannel(f"unknown channel {ch!r} in column mapping")
    recs = []
    with open(path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f), start=2):
            try:
                t = float(row[mapping["time"]])
            except (KeyError, ValueError):
                raise ParseError("missing or malformed time column", i) from None
            for ch, cols in chans.items():
                cells = [row.get(c, "") for c in cols]
                if all(c not in ("", None) for c in cells):
                    try:
                        recs.append({"t": t, "channel": ch, "values": [float(c) for c in cells]})
                    except ValueError:
                        raise ParseError(f"non-numeric value in channel {ch!r}", i) from None
    recs.sort(key=lambda r: r["t"])
    tmp = out_path or str(path) + ".jsonl"
    with open(tmp, "w") as f:
        f.write(_dump(_header(n_bs, {"source": str(path)}, None, None)) + "\n")
        for r in recs:
            f.write(_dump(r) + "\n")
    return read_log(tmp)


def write_series(path, x, y, header: str = ""):
    """Two-column numeric text for plotting."""
    data = np.column_stack([np.asarray(x, float), np.asarray(y, float)])
    np.savetxt(path, data, fmt="%.10g", header=header)

