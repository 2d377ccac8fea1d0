"""Measurement models: IMU, wheel encoders and Lighthouse sweep angles.

The stacked output is ``y = [imu(3), wheel speeds(4), lighthouse(8 per station)]``.
Lighthouse channels whose geometry is degenerate are flagged invalid in the
returned mask rather than clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NX, _vector_field, model_vector
from .params import N_ENCODER, N_MODEL, N_SENSORS, N_STATION, DriveConfig, LighthouseParams, ParamSet

N_IMU = 3
N_WE = 4
N_LH = 8
PLANE_TILT = np.pi / 6


class DegenerateGeometry(ValueError):
    """A sensor lies where the sweep-angle model is undefined."""


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    t: float
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if y.shape != mask.shape:
            raise ValueError("measurement and mask shapes differ")
        y.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)

    @property
    def n_y(self) -> int:
        return self.y.size

    def masked(self, drop) -> "MeasurementFrame":
        """Return a copy with the channels selected by ``drop`` invalidated."""
        return MeasurementFrame(self.t, self.y, self.mask & ~np.asarray(drop, dtype=bool))


def n_outputs(n_bs: int) -> int:
    return N_IMU + N_WE + N_LH * n_bs


def channel_groups(n_bs: int) -> dict[str, slice]:
    return {
        "imu": slice(0, N_IMU),
        "we": slice(N_IMU, N_IMU + N_WE),
        "lh": slice(N_IMU + N_WE, N_IMU + N_WE + N_LH * n_bs),
    }


def group_mask(n_bs: int, groups) -> np.ndarray:
    """Boolean channel mask selecting the named groups."""
    out = np.zeros(n_outputs(n_bs), dtype=bool)
    slices = channel_groups(n_bs)
    for g in groups:
        out[slices[g]] = True
    return out


def angle_channels(n_bs: int) -> np.ndarray:
    """Channels holding angles; residuals on these are wrapped to (-pi, pi]."""
    return group_mask(n_bs, ["lh"])


def channel_names(n_bs: int) -> list[str]:
    names = ["imu.ax", "imu.ay", "imu.omega", "we.fl", "we.fr", "we.rl", "we.rr"]
    for i in range(n_bs):
        names += [f"lh{i}.s{k}p{l}" for l in (1, 2) for k in range(1, N_SENSORS + 1)]
    return names


def channel_units(n_bs: int) -> list[str]:
    return ["m/s^2", "m/s^2", "rad/s"] + ["rad/s"] * N_WE + ["rad"] * (N_LH * n_bs)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# --- rotations -----------------------------------------------------------

def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def station_rotation(angles) -> np.ndarray:
    """R = Rz(phi3) Ry(phi2) Rx(phi1)."""
    p1, p2, p3 = angles
    return _rz(p3) @ _ry(p2) @ _rx(p1)


def _rotation_partials(angles):
    p1, p2, p3 = angles
    return (
        _rz(p3) @ _ry(p2) @ _drx(p1),
        _rz(p3) @ _dry(p2) @ _rx(p1),
        _drz(p3) @ _ry(p2) @ _rx(p1),
    )


def plane_tilts(station: LighthouseParams) -> np.ndarray:
    dt1, dt2 = station.tilt_offsets
    return np.array([-PLANE_TILT - dt1, PLANE_TILT - dt2])


# --- IMU -----------------------------------------------------------------

def imu_measurement(x, u, params, cfg: DriveConfig = DriveConfig()) -> np.ndarray:
    """Body accelerations as modelled (including the -v_x*omega / +v_y*omega terms) and yaw rate."""
    x = np.asarray(x, dtype=float)
    xdot = _vector_field(x, np.asarray(u, float), model_vector(params), cfg, False)[0]
    return np.stack([xdot[..., 3], xdot[..., 4], x[..., 5]], axis=-1)


# --- wheel encoders ------------------------------------------------------

def wheel_encoder_measurement(x, delta, encoder, l_f) -> np.ndarray:
    """Wheel angular rates ordered (fl, fr, rl, rr), assuming no skid."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    vx, vy, w = x[..., 3], x[..., 4], x[..., 5]
    r, b = encoder.r, encoder.b_car
    cd, sd = np.cos(delta), np.sin(delta)
    lat = sd * (vy + l_f * w)
    left = vx - 0.5 * b * w
    right = vx + 0.5 * b * w
    return np.stack([cd * left + lat, cd * right + lat, left, right], axis=-1) / r


# --- Lighthouse ----------------------------------------------------------

def sensor_world_position(x, k: int, station: LighthouseParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    bx, by = station.sensors_body[k]
    c, s = np.cos(x[..., 2]), np.sin(x[..., 2])
    return np.stack([c * bx - s * by + x[..., 0], s * bx + c * by + x[..., 1], np.zeros_like(c)], axis=-1)


def body_to_station(x, k: int, station: LighthouseParams) -> np.ndarray:
    """Position of receiver ``k`` (0-based) in the station frame."""
    if not 0 <= k < N_SENSORS:
        raise IndexError(f"sensor index {k} out of range")
    R = station_rotation(station.angles)
    d = sensor_world_position(x, k, station) - np.asarray(station.position, dtype=float)
    return d @ R


def station_to_world(q, station: LighthouseParams) -> np.ndarray:
    """Inverse of the station transform for a point given in the station frame."""
    R = station_rotation(station.angles)
    return np.asarray(q, dtype=float) @ R.T + np.asarray(station.position, dtype=float)


def sweep_angles(q, tilts):
    """Sweep angles of station-frame points ``q (..., 3)`` for each plane tilt.

    Returns ``(angles (..., n_planes), valid (..., n_planes))``; invalid
    entries are NaN.
    """
    q = np.asarray(q, dtype=float)
    qx, qy, qz = q[..., 0], q[..., 1], q[..., 2]
    rho = np.hypot(qx, qy)
    tilts = np.asarray(tilts, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = qz[..., None] * np.tan(tilts) / rho[..., None]
        valid = (rho[..., None] > 1e-12) & (np.abs(s) < 1.0)
        ang = np.arctan2(qy, qx)[..., None] + np.arcsin(np.where(valid, s, 0.0))
    return np.where(valid, ang, np.nan), valid


def lighthouse_angles(x, station: LighthouseParams, strict: bool = False):
    """The 8 sweep angles ordered (s1..s4 of plane 1, s1..s4 of plane 2).

    Returns ``(angles, valid)``. With ``strict`` a degenerate channel raises
    :class:`DegenerateGeometry` instead of being flagged.
    """
    x = np.asarray(x, dtype=float)
    q = np.stack([body_to_station(x, k, station) for k in range(N_SENSORS)], axis=-2)
    ang, valid = sweep_angles(q, plane_tilts(station))
    # (..., sensor, plane) -> (..., plane, sensor) -> flat
    ang = np.swapaxes(ang, -1, -2).reshape(x.shape[:-1] + (N_LH,))
    valid = np.swapaxes(valid, -1, -2).reshape(x.shape[:-1] + (N_LH,))
    if strict and not np.all(valid):
        raise DegenerateGeometry("sensor on the rotation axis or outside the light-plane range")
    return ang, valid


def _lighthouse_with_jacobians(x, station: LighthouseParams):
    """Angles (K, 8), validity, d/dx (K, 8, 6) and d/dtheta_lh (K, 8, 16)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = x.shape[0]
    R = station_rotation(station.angles)
    dR = _rotation_partials(station.angles)
    tilts = plane_tilts(station)
    pbs = np.asarray(station.position, dtype=float)
    c, s = np.cos(x[:, 2]), np.sin(x[:, 2])
    ang = np.empty((K, N_LH))
    valid = np.empty((K, N_LH), dtype=bool)
    Hx = np.zeros((K, N_LH, NX))
    Hth = np.zeros((K, N_LH, N_STATION))
    for k in range(N_SENSORS):
        bx, by = station.sensors_body[k]
        pw = np.stack([c * bx - s * by + x[:, 0], s * bx + c * by + x[:, 1], np.zeros(K)], axis=-1)
        d = pw - pbs
        q = d @ R
        qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
        rho2 = qx * qx + qy * qy
        rho = np.sqrt(rho2)
        # dq/d(world point) = R^T
        dpw_dpsi = np.stack([-s * bx - c * by, c * bx - s * by, np.zeros(K)], axis=-1)
        dq_dx = np.zeros((K, 3, NX))
        dq_dx[:, :, 0] = R.T[:, 0]
        dq_dx[:, :, 1] = R.T[:, 1]
        dq_dx[:, :, 2] = dpw_dpsi @ R
        dq_dth = np.zeros((K, 3, N_STATION))
        for i in range(3):
            dq_dth[:, :, i] = d @ dR[i]
        dq_dth[:, :, 3:6] = -R.T
        dq_dth[:, :, 6 + 2 * k] = np.outer(c, R.T[:, 0]) + np.outer(s, R.T[:, 1])
        dq_dth[:, :, 7 + 2 * k] = -np.outer(s, R.T[:, 0]) + np.outer(c, R.T[:, 1])
        for l in range(2):
            tan_t = np.tan(tilts[l])
            with np.errstate(divide="ignore", invalid="ignore"):
                arg = qz * tan_t / rho
                ok = (rho > 1e-12) & (np.abs(arg) < 1.0)
                arg_ok = np.where(ok, arg, 0.0)
                rho_ok = np.where(ok, rho, 1.0)
                root = np.sqrt(1.0 - arg_ok * arg_ok)
                a = np.arctan2(qy, qx) + np.arcsin(arg_ok)
                da_dq = np.stack([
                    -qy / rho_ok ** 2 - qz * tan_t * qx / rho_ok ** 3 / root,
                    qx / rho_ok ** 2 - qz * tan_t * qy / rho_ok ** 3 / root,
                    tan_t / rho_ok / root,
                ], axis=-1)
                da_dt = qz / rho_ok / np.cos(tilts[l]) ** 2 / root
            ch = l * N_SENSORS + k
            ang[:, ch] = np.where(ok, a, np.nan)
            valid[:, ch] = ok
            da_dq = np.where(ok[:, None], da_dq, 0.0)
            Hx[:, ch, :] = np.einsum("ki,kij->kj", da_dq, dq_dx)
            Hth[:, ch, :] = np.einsum("ki,kij->kj", da_dq, dq_dth)
            Hth[:, ch, 14 + l] = np.where(ok, -da_dt, 0.0)
    return ang, valid, Hx, Hth


# --- stacked model -------------------------------------------------------

def output_model(x, u, theta: ParamSet, cfg: DriveConfig = DriveConfig()):
    """Noise-free stacked output and validity mask for a batch of states."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    imu = imu_measurement(x, u, theta.model, cfg)
    we = wheel_encoder_measurement(x, u[..., 0], theta.encoder, theta.model.l_f)
    parts = [imu, we]
    masks = [np.ones(imu.shape, bool), np.ones(we.shape, bool)]
    for st in theta.stations:
        a, v = lighthouse_angles(x, st)
        parts.append(a)
        masks.append(v)
    return np.concatenate(parts, axis=-1), np.concatenate(masks, axis=-1)


def full_measurement(x, u, w, theta: ParamSet, cfg: DriveConfig = DriveConfig(), t: float = 0.0) -> MeasurementFrame:
    """Stacked measurement with additive noise ``w`` (length n_y, or the full
    6 + n_y noise vector whose tail is the measurement part)."""
    y, mask = output_model(x, u, theta, cfg)
    if w is not None:
        w = np.asarray(w, dtype=float)
        y = y + w[-y.shape[-1]:]
    return MeasurementFrame(t, np.where(mask, y, 0.0), mask)


def measurement_jacobians(x, u, theta: ParamSet, cfg: DriveConfig = DriveConfig()):
    """Outputs and Jacobians for a batch of states ``x (K, 6)``.

    Returns ``(y, mask, Hx, Hw, Htheta)`` with shapes (K, n_y), (K, n_y),
    (K, n_y, 6), (n_y, n_y) and (K, n_y, n_theta). Rows of degenerate
    channels are zero; ``Hw`` is the identity since noise is additive.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.broadcast_to(np.asarray(u, dtype=float), (x.shape[0], 2))
    K = x.shape[0]
    p = theta.model.to_vector()
    n_y = n_outputs(theta.n_bs)
    n_th = theta.size
    y = np.empty((K, n_y))
    mask = np.ones((K, n_y), dtype=bool)
    Hx = np.zeros((K, n_y, NX))
    Hth = np.zeros((K, n_y, n_th))

    xdot, A, _, P = _vector_field(x, u, p, cfg, True)
    y[:, 0] = xdot[:, 3]
    y[:, 1] = xdot[:, 4]
    y[:, 2] = x[:, 5]
    Hx[:, 0:2, :] = A[:, 3:5, :]
    Hx[:, 2, 5] = 1.0
    Hth[:, 0:2, :N_MODEL] = P[:, 3:5, :]

    r, b, lf = theta.encoder.r, theta.encoder.b_car, theta.model.l_f
    vx, vy, w = x[:, 3], x[:, 4], x[:, 5]
    cd, sd = np.cos(u[:, 0]), np.sin(u[:, 0])
    we = wheel_encoder_measurement(x, u[:, 0], theta.encoder, lf)
    o = N_IMU
    y[:, o:o + N_WE] = we
    Hx[:, o + 0, 3:] = np.stack([cd, sd, -0.5 * b * cd + lf * sd], -1) / r
    Hx[:, o + 1, 3:] = np.stack([cd, sd, 0.5 * b * cd + lf * sd], -1) / r
    Hx[:, o + 2, 3:] = np.stack([np.ones(K), np.zeros(K), -0.5 * b * np.ones(K)], -1) / r
    Hx[:, o + 3, 3:] = np.stack([np.ones(K), np.zeros(K), 0.5 * b * np.ones(K)], -1) / r
    ir = N_MODEL
    ib = N_MODEL + 1
    Hth[:, o:o + N_WE, ir] = -we / r
    Hth[:, o:o + N_WE, ib] = np.stack([-0.5 * cd * w, 0.5 * cd * w, -0.5 * w, 0.5 * w], -1) / r
    Hth[:, o, 8] = sd * w / r
    Hth[:, o + 1, 8] = sd * w / r

    o = N_IMU + N_WE
    for i, st in enumerate(theta.stations):
        a, v, hx, hth = _lighthouse_with_jacobians(x, st)
        sl = slice(o + N_LH * i, o + N_LH * (i + 1))
        y[:, sl] = np.where(v, a, 0.0)
        mask[:, sl] = v
        Hx[:, sl, :] = hx
        off = N_MODEL + N_ENCODER + N_STATION * i
        Hth[:, sl, off:off + N_STATION] = hth
    Hw = np.eye(n_y)
    return y, mask, Hx, Hw, Hth
