"""Dynamic bicycle model with smoothed Pacejka lateral tire forces.

All functions broadcast over leading batch dimensions: a state is an array of
shape ``(..., 6)`` ordered ``[x_p, y_p, psi, v_x, v_y, omega]`` and an input
is ``(..., 2)`` ordered ``[delta, T]``. Jacobians are hand-derived and carried
through the RK4 stages, so the discrete map and its derivatives always come
from the same arithmetic.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .params import N_MODEL, DriveConfig, ModelParams, ParamSet

NX = 6
NU = 2

# indices into the "primitive" gradient space used internally
_VX, _VY, _W, _DELTA, _T = range(5)
_P0 = 5
(_DF, _DR, _CF, _CR, _BF, _BR, _M, _IZ, _LF, _LR,
 _CD0, _CD1, _CD2, _CM1, _CM2) = range(_P0, _P0 + N_MODEL)
_NQ = _P0 + N_MODEL


class VehicleState(NamedTuple):
    x_p: float
    y_p: float
    psi: float
    v_x: float
    v_y: float
    omega: float


class ControlInput(NamedTuple):
    delta: float
    torque: float


def model_vector(params) -> np.ndarray:
    """Return the 15-entry model parameter vector from any parameter holder."""
    if isinstance(params, ParamSet):
        return params.model.to_vector()
    if isinstance(params, ModelParams):
        return params.to_vector()
    return np.asarray(params, dtype=float)


def _smoothed_slip(num, vx, offset, eps):
    """Slip angle arctan(num / vx) + offset with the cubic low-speed patch.

    Returns the angle and its partials with respect to vx, num and offset.
    """
    big = np.abs(vx) >= eps
    if np.all(big):
        den = vx * vx + num * num
        return (np.arctan(num / vx) + offset, -num / den, vx / den,
                np.ones(np.broadcast_shapes(np.shape(vx), np.shape(num), np.shape(offset))))
    vx_safe = np.where(big, vx, eps)
    den = vx_safe * vx_safe + num * num
    a_big = np.arctan(num / vx_safe) + offset

    e2 = eps * eps
    n2 = num * num
    val = np.arctan(num / eps) + offset
    slope = -num / (e2 + n2)
    c = (slope - val / eps) / (2.0 * e2)
    b = val / eps - c * e2
    a_small = b * vx + c * vx ** 3

    g = vx ** 3 - e2 * vx
    dval_dn = eps / (e2 + n2)
    dslope_dn = (n2 - e2) / (e2 + n2) ** 2
    dc_dn = (dslope_dn - dval_dn / eps) / (2.0 * e2)

    alpha = np.where(big, a_big, a_small)
    d_vx = np.where(big, -num / den, b + 3.0 * c * vx * vx)
    d_num = np.where(big, vx_safe / den, dval_dn * vx / eps + dc_dn * g)
    d_off = np.where(big, 1.0, vx / eps - g / (2.0 * e2 * eps))
    return alpha, d_vx, d_num, d_off


def slip_angles(state, delta, params, cfg: DriveConfig = DriveConfig()):
    """Front and rear slip angles; cubic in v_x for ``|v_x| < cfg.eps``."""
    x = np.asarray(state, dtype=float)
    p = model_vector(params)
    vx, vy, w = x[..., 3], x[..., 4], x[..., 5]
    lf, lr = p[..., 8], p[..., 9]
    a_f = _smoothed_slip(-w * lf - vy, vx, np.asarray(delta, dtype=float), cfg.eps)[0]
    a_r = _smoothed_slip(w * lr - vy, vx, 0.0, cfg.eps)[0]
    return a_f, a_r


def pacejka(alpha, B, C, D):
    return D * np.sin(C * np.arctan(B * alpha))


def lateral_tire_forces(alpha_f, alpha_r, params):
    p = model_vector(params)
    F_yf = pacejka(alpha_f, p[..., 4], p[..., 2], p[..., 0])
    F_yr = pacejka(alpha_r, p[..., 5], p[..., 3], p[..., 1])
    return F_yf, F_yr


def longitudinal_forces(v_x, torque, params, cfg: DriveConfig = DriveConfig()):
    """Rear drive force, front drive force and friction force."""
    p = model_vector(params)
    F_m = (p[..., 13] - p[..., 14] * v_x) * torque
    F_fr = np.sign(v_x) * (p[..., 12] * v_x * v_x + p[..., 11] * v_x + p[..., 10])
    return cfg.gamma * F_m, (1.0 - cfg.gamma) * F_m, F_fr


def _vector_field(x, u, p, cfg, grad):
    """Continuous dynamics and, if ``grad``, partials w.r.t. x, u and params."""
    psi, vx, vy, w = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    delta, T = u[..., 0], u[..., 1]
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], p.shape[:-1])
    pb = np.broadcast_to(p, shape + (N_MODEL,))
    Df, Dr, Cf, Cr, Bf, Br, m, Iz, lf, lr, Cd0, Cd1, Cd2, Cm1, Cm2 = np.moveaxis(pb, -1, 0)

    nf = -w * lf - vy
    nr = w * lr - vy
    af, daf_vx, daf_n, daf_d = _smoothed_slip(nf, vx, delta, cfg.eps)
    ar, dar_vx, dar_n, _ = _smoothed_slip(nr, vx, 0.0, cfg.eps)

    atf = np.arctan(Bf * af)
    atr = np.arctan(Br * ar)
    sf, cf_ = np.sin(Cf * atf), np.cos(Cf * atf)
    sr, cr_ = np.sin(Cr * atr), np.cos(Cr * atr)
    Fyf = Df * sf
    Fyr = Dr * sr

    gam = cfg.gamma
    Fm = (Cm1 - Cm2 * vx) * T
    Fxr = gam * Fm
    Fxf = (1.0 - gam) * Fm
    sgn = np.sign(vx)
    Ffr = sgn * (Cd2 * vx * vx + Cd1 * vx + Cd0)

    cd, sd = np.cos(delta), np.sin(delta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    Nx = Fxr + Fxf * cd - Fyf * sd - Ffr
    Ny = Fyr + Fxf * sd + Fyf * cd
    Nw = Fyf * lf * cd + Fxf * lf * sd - Fyr * lr

    xdot = np.empty(shape + (NX,))
    xdot[..., 0] = vx * cpsi - vy * spsi
    xdot[..., 1] = vx * spsi + vy * cpsi
    xdot[..., 2] = w
    xdot[..., 3] = Nx / m + vy * w
    xdot[..., 4] = Ny / m - vx * w
    xdot[..., 5] = Nw / Iz
    if not grad:
        return xdot, None, None, None

    def z():
        return np.zeros(shape + (_NQ,))

    # slip angle gradients in primitive space
    gaf = z()
    gaf[..., _VX] = daf_vx
    gaf[..., _VY] = -daf_n
    gaf[..., _W] = -daf_n * lf
    gaf[..., _DELTA] = daf_d
    gaf[..., _LF] = -daf_n * w
    gar = z()
    gar[..., _VX] = dar_vx
    gar[..., _VY] = -dar_n
    gar[..., _W] = dar_n * lr
    gar[..., _LR] = dar_n * w

    dFyf_da = Df * cf_ * Cf * Bf / (1.0 + (Bf * af) ** 2)
    dFyr_da = Dr * cr_ * Cr * Br / (1.0 + (Br * ar) ** 2)
    gFyf = dFyf_da[..., None] * gaf
    gFyf[..., _DF] += sf
    gFyf[..., _CF] += Df * cf_ * atf
    gFyf[..., _BF] += Df * cf_ * Cf * af / (1.0 + (Bf * af) ** 2)
    gFyr = dFyr_da[..., None] * gar
    gFyr[..., _DR] += sr
    gFyr[..., _CR] += Dr * cr_ * atr
    gFyr[..., _BR] += Dr * cr_ * Cr * ar / (1.0 + (Br * ar) ** 2)

    gFm = z()
    gFm[..., _VX] = -Cm2 * T
    gFm[..., _T] = Cm1 - Cm2 * vx
    gFm[..., _CM1] = T
    gFm[..., _CM2] = -vx * T
    gFfr = z()
    gFfr[..., _VX] = sgn * (2.0 * Cd2 * vx + Cd1)
    gFfr[..., _CD0] = sgn
    gFfr[..., _CD1] = sgn * vx
    gFfr[..., _CD2] = sgn * vx * vx

    cdn, sdn = cd[..., None], sd[..., None]
    gNx = (gam + (1.0 - gam) * cdn) * gFm - sdn * gFyf - gFfr
    gNx[..., _DELTA] += -Fxf * sd - Fyf * cd
    gNy = gFyr + (1.0 - gam) * sdn * gFm + cdn * gFyf
    gNy[..., _DELTA] += Fxf * cd - Fyf * sd
    gNw = (lf * cd)[..., None] * gFyf + (lf * sd)[..., None] * (1.0 - gam) * gFm - lr[..., None] * gFyr
    gNw[..., _DELTA] += lf * (-Fyf * sd + Fxf * cd)
    gNw[..., _LF] += Fyf * cd + Fxf * sd
    gNw[..., _LR] += -Fyr

    gvx = gNx / m[..., None]
    gvx[..., _M] += -Nx / m ** 2
    gvx[..., _VY] += w
    gvx[..., _W] += vy
    gvy = gNy / m[..., None]
    gvy[..., _M] += -Ny / m ** 2
    gvy[..., _VX] += -w
    gvy[..., _W] += -vx
    gw = gNw / Iz[..., None]
    gw[..., _IZ] += -Nw / Iz ** 2

    A = np.zeros(shape + (NX, NX))
    A[..., 0, 2] = -vx * spsi - vy * cpsi
    A[..., 0, 3] = cpsi
    A[..., 0, 4] = -spsi
    A[..., 1, 2] = vx * cpsi - vy * spsi
    A[..., 1, 3] = spsi
    A[..., 1, 4] = cpsi
    A[..., 2, 5] = 1.0
    G = np.stack([gvx, gvy, gw], axis=-2)
    A[..., 3:, 3:] = G[..., :3]
    B = np.zeros(shape + (NX, NU))
    B[..., 3:, :] = G[..., _DELTA:_T + 1]
    P = np.zeros(shape + (NX, N_MODEL))
    P[..., 3:, :] = G[..., _P0:]
    return xdot, A, B, P


def continuous_dynamics(x, u, params, cfg: DriveConfig = DriveConfig()) -> np.ndarray:
    return _vector_field(np.asarray(x, float), np.asarray(u, float), model_vector(params), cfg, False)[0]


def continuous_jacobians(x, u, params, cfg: DriveConfig = DriveConfig()):
    """Partials (A, B, P) of the continuous vector field w.r.t. x, u, params."""
    _, A, B, P = _vector_field(np.asarray(x, float), np.asarray(u, float), model_vector(params), cfg, True)
    return A, B, P


def _rk4(x, u, p, h, cfg, grad):
    k1, A1, B1, P1 = _vector_field(x, u, p, cfg, grad)
    k2, A2, B2, P2 = _vector_field(x + 0.5 * h * k1, u, p, cfg, grad)
    k3, A3, B3, P3 = _vector_field(x + 0.5 * h * k2, u, p, cfg, grad)
    k4, A4, B4, P4 = _vector_field(x + h * k3, u, p, cfg, grad)
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not grad:
        return xn, None, None, None
    eye = np.eye(NX)
    # sensitivities of each stage slope k_i w.r.t. x, u and p
    kx2 = A2 @ (eye + 0.5 * h * A1)
    ku2 = A2 @ (0.5 * h * B1) + B2
    kp2 = A2 @ (0.5 * h * P1) + P2
    kx3 = A3 @ (eye + 0.5 * h * kx2)
    ku3 = A3 @ (0.5 * h * ku2) + B3
    kp3 = A3 @ (0.5 * h * kp2) + P3
    kx4 = A4 @ (eye + h * kx3)
    ku4 = A4 @ (h * ku3) + B4
    kp4 = A4 @ (h * kp3) + P4
    Lx = eye + (h / 6.0) * (A1 + 2.0 * kx2 + 2.0 * kx3 + kx4)
    Lu = (h / 6.0) * (B1 + 2.0 * ku2 + 2.0 * ku3 + ku4)
    Lp = (h / 6.0) * (P1 + 2.0 * kp2 + 2.0 * kp3 + kp4)
    return xn, Lx, Lu, Lp


def discrete_step(x, u, w, theta, dt: float, cfg: DriveConfig = DriveConfig(), substeps: int = 1):
    """Advance the state by ``dt`` with ``substeps`` RK4 steps, then add ``w``.

    ``w`` is the 6-dim process noise (``None`` means zero).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = model_vector(theta)
    h = dt / substeps
    for _ in range(substeps):
        x = _rk4(x, u, p, h, cfg, False)[0]
    if w is not None:
        x = x + np.asarray(w, dtype=float)[..., :NX]
    return x


def dynamics_jacobians(x, u, w, theta, dt: float, cfg: DriveConfig = DriveConfig(), substeps: int = 1):
    """Discrete step and its Jacobians w.r.t. x, u, process noise and model params.

    Returns ``(x_next, Fx, Fu, Fw, Fp)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = model_vector(theta)
    h = dt / substeps
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], p.shape[:-1])
    Jx = np.broadcast_to(np.eye(NX), shape + (NX, NX))
    Ju = np.zeros(shape + (NX, NU))
    Jp = np.zeros(shape + (NX, N_MODEL))
    for _ in range(substeps):
        x, Lx, Lu, Lp = _rk4(x, u, p, h, cfg, True)
        Jx, Ju, Jp = Lx @ Jx, Lx @ Ju + Lu, Lx @ Jp + Lp
    if w is not None:
        x = x + np.asarray(w, dtype=float)[..., :NX]
    Fw = np.broadcast_to(np.eye(NX), shape + (NX, NX)).copy()
    return x, np.array(Jx), Ju, Fw, Jp
