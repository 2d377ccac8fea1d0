"""Base-station pose calibration from static angle measurements, and
crossing-beams reprojection of averaged angles onto the tracking plane."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nlp import LMOptions, NotConverged, ResidualProblem, SolveReport, solve_nlls
from .params import LighthouseParams
from .sensors import (
    PLANE_TILT,
    DegenerateGeometry,
    _rotation_partials,
    lighthouse_angles,
    station_rotation,
    sweep_angles,
)


class EmptySamples(ValueError):
    """No angle samples were supplied for averaging."""


@dataclass(frozen=True)
class StationPose:
    angles: tuple[float, float, float]
    position: tuple[float, float, float]

    def __post_init__(self):
        v = np.concatenate([np.asarray(self.angles, float), np.asarray(self.position, float)])
        if v.shape != (6,) or not np.all(np.isfinite(v)):
            raise ValueError("station pose needs 3 finite angles and a finite 3-D position")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.angles, float), np.asarray(self.position, float)])

    @classmethod
    def from_vector(cls, v) -> "StationPose":
        v = np.asarray(v, dtype=float)
        return cls(tuple(float(a) for a in v[:3]), tuple(float(p) for p in v[3:6]))

    @property
    def rotation(self) -> np.ndarray:
        return station_rotation(self.angles)


def average_angles(samples):
    """Arithmetic mean of angle samples.

    A flat sequence gives a scalar. Arrays of shape ``(..., 2)`` are averaged
    over every axis but the last (samples and sensors), giving one value per
    light plane.
    """
    a = np.asarray(samples, dtype=float)
    if a.size == 0:
        raise EmptySamples("no samples to average")
    if a.ndim <= 1:
        return float(np.mean(a))
    return a.reshape(-1, a.shape[-1]).mean(axis=0)


@dataclass(frozen=True, eq=False)
class CalibrationPoint:
    """Known world position and the raw angle samples recorded there.

    ``samples`` has shape ``(n_samples, n_sensors, 2)`` or ``(n_samples, 2)``.
    """

    position: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))

    @property
    def mean_angles(self) -> np.ndarray:
        return average_angles(self.samples)


def plane_tilts_from_offsets(tilt_offsets) -> np.ndarray:
    dt1, dt2 = tilt_offsets
    return np.array([-PLANE_TILT - dt1, PLANE_TILT - dt2])


def point_angles(pose_vec, points, tilts):
    """Sweep angles ``(n, 2)`` of world points seen from the pose ``(phi, p_bs)``."""
    R = station_rotation(pose_vec[:3])
    q = (np.atleast_2d(points) - pose_vec[3:6]) @ R
    return sweep_angles(q, tilts)


def _angle_jacobian(pose_vec, points, tilts):
    R = station_rotation(pose_vec[:3])
    dR = _rotation_partials(pose_vec[:3])
    d = np.atleast_2d(points) - pose_vec[3:6]
    q = d @ R
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    rho = np.hypot(qx, qy)
    dq = np.empty((len(q), 3, 6))
    for i in range(3):
        dq[:, :, i] = d @ dR[i]
    dq[:, :, 3:6] = -R.T
    J = np.empty((len(q), 2, 6))
    for l, t in enumerate(tilts):
        tt = np.tan(t)
        arg = np.clip(qz * tt / rho, -1 + 1e-15, 1 - 1e-15)
        root = np.sqrt(1.0 - arg * arg)
        da = np.stack([
            -qy / rho ** 2 - qz * tt * qx / rho ** 3 / root,
            qx / rho ** 2 - qz * tt * qy / rho ** 3 / root,
            tt / rho / root,
        ], axis=-1)
        J[:, l, :] = np.einsum("ki,kij->kj", da, dq)
    return J.reshape(-1, 6)


@dataclass
class CalibrationResult:
    pose: StationPose
    residuals: np.ndarray          # (n_cal, 2) angle residuals at the optimum [rad]
    report: SolveReport = field(repr=False)


def calibrate_station(points, init: StationPose, tilt_offsets=(0.0, 0.0),
                      opts: LMOptions = LMOptions(), require_convergence: bool = True) -> CalibrationResult:
    """Fit the station pose to averaged angles at known positions."""
    points = list(points)
    if len(points) < 3:
        raise ValueError("at least 3 calibration points are needed for 6 unknowns")
    P = np.array([p.position for p in points])
    abar = np.array([p.mean_angles for p in points])
    tilts = plane_tilts_from_offsets(tilt_offsets)

    def residual(z):
        a, valid = point_angles(z, P, tilts)
        # points outside the sweep range get a large finite penalty so LM backs off
        return np.where(valid, abar - np.where(valid, a, 0.0), 10.0).ravel()

    def jacobian(z):
        return -_angle_jacobian(z, P, tilts)

    prob = ResidualProblem(residual, jacobian, 6)
    rep = solve_nlls(prob, init.to_vector(), opts)
    if require_convergence and not rep.converged:
        raise NotConverged(f"calibration stopped with status {rep.status}", rep)
    return CalibrationResult(StationPose.from_vector(rep.x), residual(rep.x).reshape(-1, 2), rep)


def triangulate_crossing_beams(angles, pose: StationPose, tilt_offsets=(0.0, 0.0),
                               z_deck: float = 0.0, min_incidence: float = 1e-6) -> np.ndarray:
    """World point where the ray shared by both swept planes meets ``z = z_deck``.

    A swept plane with angle ``a`` and tilt ``t`` contains the station-frame
    points with ``q_x sin a - q_y cos a - q_z tan t = 0``; the two planes share
    the station origin, so they meet in a ray.
    """
    a1, a2 = np.asarray(angles, dtype=float)
    if not (np.isfinite(a1) and np.isfinite(a2)):
        raise DegenerateGeometry("both plane angles are required")
    t1, t2 = plane_tilts_from_offsets(tilt_offsets)
    n1 = np.array([np.sin(a1), -np.cos(a1), -np.tan(t1)])
    n2 = np.array([np.sin(a2), -np.cos(a2), -np.tan(t2)])
    d = np.cross(n1, n2)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        raise DegenerateGeometry("light planes are parallel")
    d /= norm
    # keep the branch in front of the rotor (the arcsin principal branch)
    if d[0] * np.cos(a1) + d[1] * np.sin(a1) < 0:
        d = -d
    dw = pose.rotation @ d
    p0 = np.asarray(pose.position, dtype=float)
    if abs(dw[2]) < min_incidence:
        raise DegenerateGeometry("ray nearly parallel to the tracking plane")
    s = (z_deck - p0[2]) / dw[2]
    if s <= 0:
        raise DegenerateGeometry("tracking plane is behind the station")
    return p0 + s * dw


def reprojection_residuals(points, pose: StationPose, tilt_offsets=(0.0, 0.0), z_deck: float = 0.0) -> np.ndarray:
    """Planar distance between each triangulated averaged angle pair and its known position [m]."""
    out = []
    for p in points:
        w = triangulate_crossing_beams(p.mean_angles, pose, tilt_offsets, z_deck)
        out.append(np.hypot(*(w[:2] - p.position[:2])))
    return np.array(out)


# --- synthetic scene -----------------------------------------------------

def scene_grid(nx: int = 6, ny: int = 4, extent=((-1.5, 1.5), (-1.0, 1.0)), z: float = 0.0) -> np.ndarray:
    xs = np.linspace(*extent[0], nx)
    ys = np.linspace(*extent[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])


def spread_order(positions) -> np.ndarray:
    """Greedy farthest-point ordering, so each added point fills the largest gap."""
    P = np.asarray(positions, dtype=float)[:, :2]
    c = P.mean(axis=0)
    order = [int(np.argmax(np.linalg.norm(P - c, axis=1)))]
    dist = np.linalg.norm(P - P[order[0]], axis=1)
    while len(order) < len(P):
        i = int(np.argmax(dist))
        order.append(i)
        dist = np.minimum(dist, np.linalg.norm(P - P[i], axis=1))
    return np.array(order)


def synthetic_points(station: LighthouseParams, positions, n_samples: int = 50, sigma: float = 3e-4,
                     rng: np.random.Generator | None = None, yaw=None,
                     at_center: bool = False) -> list[CalibrationPoint]:
    """Record noisy angles of the car's receivers with the car centred on each position.

    With ``at_center`` a single receiver sits exactly on the position, which
    makes the calibration problem exactly realizable.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if at_center:
        station = replace(station, sensors_body=((0.0, 0.0),) * len(station.sensors_body))
    pts = []
    for i, p in enumerate(np.asarray(positions, dtype=float)):
        psi = 0.0 if yaw is None else float(np.asarray(yaw)[i])
        x = np.array([p[0], p[1], psi, 0.0, 0.0, 0.0])
        ang, valid = lighthouse_angles(x, station)
        if not np.all(valid):
            raise DegenerateGeometry(f"calibration point {i} is outside the sweep range")
        per_sensor = ang.reshape(2, -1).T          # (sensor, plane)
        samples = per_sensor[None] + sigma * rng.standard_normal((n_samples,) + per_sensor.shape)
        pts.append(CalibrationPoint(p, samples))
    return pts


def perturbed_pose(station: LighthouseParams, d_angle: float = 0.1, d_pos: float = 0.2,
                   rng: np.random.Generator | None = None) -> StationPose:
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.asarray(station.angles) + d_angle * rng.choice([-1.0, 1.0], 3)
    p = np.asarray(station.position) + d_pos * rng.choice([-1.0, 1.0], 3)
    return StationPose(tuple(a), tuple(p))


def residual_sweep(station: LighthouseParams, init: StationPose, n_values=range(3, 11), *,
                   positions=None, n_samples: int = 50, sigma: float = 3e-4, seed: int = 0,
                   z_deck: float = 0.0, opts: LMOptions = LMOptions()) -> dict:
    """Calibrate with the first ``n`` spread-ordered points and reproject all scene points.

    Returns ``{"n_cal": [...], "mean": [...], "max": [...]}`` in metres.
    """
    positions = scene_grid() if positions is None else np.asarray(positions, float)
    rng = np.random.Generator(np.random.Philox(seed))
    pts = synthetic_points(station, positions, n_samples, sigma, rng)
    order = spread_order(positions)
    out = {"n_cal": [], "mean": [], "max": []}
    for n in n_values:
        res = calibrate_station([pts[i] for i in order[:n]], init, station.tilt_offsets, opts,
                                require_convergence=False)
        try:
            err = reprojection_residuals(pts, res.pose, station.tilt_offsets, z_deck)
        except DegenerateGeometry:
            err = np.array([np.inf])
        out["n_cal"].append(int(n))
        out["mean"].append(float(np.mean(err)))
        out["max"].append(float(np.max(err)))
    return out
