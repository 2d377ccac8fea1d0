import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, random_driving_state, random_input
from minicar.dynamics import (
    _smoothed_slip,
    continuous_dynamics,
    continuous_jacobians,
    discrete_step,
    dynamics_jacobians,
    lateral_tire_forces,
    longitudinal_forces,
    pacejka,
    slip_angles,
)
from minicar.params import DriveConfig, MODEL_PARAM_NAMES


def settled_points(model, n, seed=0):
    """States on smooth trajectories: random heading, speed and input, then 0.5 s of driving."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = np.array([*rng.uniform(-1, 1, 2), rng.uniform(-3, 3), rng.uniform(1.0, 3.0), 0.0, 0.0])
        u = np.array([rng.uniform(-0.1, 0.1), rng.uniform(0.0, 0.5)])
        out.append((discrete_step(x, u, None, model, 0.5, substeps=200), u))
    return out


# --- slip angles -----------------------------------------------------------

def test_slip_zero_without_lateral_motion(model):
    af, ar = slip_angles([0, 0, 0, 1.0, 0, 0], 0.0, model, DriveConfig(eps=0.1))
    assert af == 0.0 and ar == 0.0


@pytest.mark.parametrize("vy,w,delta", [(0.3, -1.0, 0.2), (-0.1, 2.0, -0.3), (0.0, 0.0, 0.1)])
def test_slip_vanishes_at_standstill(model, vy, w, delta):
    af, ar = slip_angles([0, 0, 0, 0.0, vy, w], delta, model)
    assert af == 0.0 and ar == 0.0


def test_slip_cubic_coefficients_match_linear_solve(model):
    eps = 0.1
    for num, off in [(0.3, 0.1), (-0.5, 0.0), (0.05, -0.2)]:
        val = np.arctan(num / eps) + off
        slope = -num / (eps ** 2 + num ** 2)
        # p(v) = b v + c v^3 with p(eps) = val and p'(eps) = slope
        b, c = np.linalg.solve([[eps, eps ** 3], [1.0, 3 * eps ** 2]], [val, slope])
        v = np.linspace(-eps, eps, 7)[1:-1]
        a, d_vx, _, _ = _smoothed_slip(np.full_like(v, num), v, off, eps)
        np.testing.assert_allclose(a, b * v + c * v ** 3, atol=1e-13)
        np.testing.assert_allclose(d_vx, b + 3 * c * v ** 2, atol=1e-12)


def test_slip_branches_meet_at_eps():
    eps = 0.1
    below = np.nextafter(eps, 0.0)
    for num, off in [(0.3, 0.1), (-0.5, 0.0), (1.2, -0.3)]:
        hi = _smoothed_slip(np.array([num]), np.array([eps]), off, eps)
        lo = _smoothed_slip(np.array([num]), np.array([below]), off, eps)
        assert abs(hi[0][0] - lo[0][0]) < 1e-12
        assert abs(hi[1][0] - lo[1][0]) < 1e-9


def test_slip_partials_match_central_differences(rng):
    eps = 0.1
    for vx in (0.05, -0.07, 0.5, 1.3):
        num, off = rng.uniform(-1, 1), rng.uniform(-0.3, 0.3)
        _, d_vx, d_num, d_off = _smoothed_slip(np.array(num), np.array(vx), off, eps)
        f = lambda z: _smoothed_slip(np.array(z[1]), np.array(z[0]), z[2], eps)[0]
        J = central_difference(f, [vx, num, off])
        np.testing.assert_allclose([d_vx, d_num, d_off], J, rtol=1e-6, atol=1e-8)


# --- forces ----------------------------------------------------------------

def test_pacejka_zero_and_limit():
    assert pacejka(0.0, 3.0, 1.3, 0.65) == 0.0
    np.testing.assert_allclose(pacejka(1e9, 3.0, 1.3, 0.65), 0.65 * np.sin(1.3 * np.pi / 2), rtol=1e-8)


def test_pacejka_peak_matches_grid_scan():
    B, C, D = 3.0, 1.3, 0.65
    # closed form: C arctan(B a) = pi/2
    a_peak = np.tan(np.pi / (2 * C)) / B
    grid = np.linspace(0, 5, 500001)
    assert abs(grid[np.argmax(pacejka(grid, B, C, D))] - a_peak) < 2e-5


@given(st.floats(-10, 10), st.floats(0.5, 5), st.floats(0.5, 1.9), st.floats(0.1, 2))
def test_pacejka_odd_and_bounded(a, B, C, D):
    assert pacejka(-a, B, C, D) == -pacejka(a, B, C, D)
    assert abs(pacejka(a, B, C, D)) <= D


def test_lateral_forces_zero_at_zero_slip(model):
    assert lateral_tire_forces(0.0, 0.0, model) == (0.0, 0.0)


def test_longitudinal_forces(model):
    Fxr, Fxf, Ffr = longitudinal_forces(2.0, 0.0, model)
    assert Fxr == 0.0 and Fxf == 0.0
    # C_d2 v^2 + C_d1 v + C_d0 at v = 2
    assert Ffr == pytest.approx(model.C_d2 * 4 + model.C_d1 * 2 + model.C_d0, abs=1e-15)
    assert longitudinal_forces(0.0, 0.4, model)[2] == 0.0
    Fxr, Fxf, _ = longitudinal_forces(1.0, 0.5, model, DriveConfig(gamma=1.0))
    assert Fxf == 0.0 and Fxr == pytest.approx((model.C_m1 - model.C_m2) * 0.5)


# --- continuous dynamics ---------------------------------------------------

def test_standstill_equilibrium(model):
    np.testing.assert_array_equal(continuous_dynamics(np.zeros(6), np.zeros(2), model), np.zeros(6))


def test_body_velocity_rotation(model):
    xd = continuous_dynamics([0, 0, np.pi / 2, 1.5, 0, 0], [0, 0], model)
    assert abs(xd[0]) < 1e-15 and xd[1] == pytest.approx(1.5)


def test_straight_driving_hand_expansion(model):
    v, T = 1.2, 0.4
    xd = continuous_dynamics([0, 0, 0, v, 0, 0], [0, T], model)
    Fm = (model.C_m1 - model.C_m2 * v) * T
    Ffr = model.C_d2 * v * v + model.C_d1 * v + model.C_d0
    assert xd[3] == pytest.approx((Fm - Ffr) / model.m, rel=1e-14)
    assert xd[4] == 0.0 and xd[5] == 0.0


def test_continuous_jacobians_match_central_differences(model, rng):
    p = model.to_vector()
    for _ in range(20):
        x, u = random_driving_state(rng), random_input(rng)
        A, B, P = continuous_jacobians(x, u, model)
        np.testing.assert_allclose(A, central_difference(lambda z: continuous_dynamics(z, u, model), x),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(B, central_difference(lambda z: continuous_dynamics(x, z, model), u),
                                   rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(P, central_difference(lambda z: continuous_dynamics(x, u, z), p, h=1e-7),
                                   rtol=1e-5, atol=1e-5)


# --- discrete step ---------------------------------------------------------

def test_discrete_fixed_point(model):
    np.testing.assert_array_equal(discrete_step(np.zeros(6), np.zeros(2), np.zeros(6), model, 0.02), np.zeros(6))


def test_additive_process_noise(model, rng):
    x, u = random_driving_state(rng), random_input(rng)
    w = rng.normal(size=6)
    a = discrete_step(x, u, w, model, 0.02)
    b = discrete_step(x, u, None, model, 0.02)
    np.testing.assert_allclose(a - b, w, atol=1e-15)


def test_rk4_matches_fine_euler_on_smooth_trajectory(model):
    for x, u in settled_points(model, 10, seed=3):
        xe = x.copy()
        for _ in range(1000):
            xe = xe + 2e-5 * continuous_dynamics(xe, u, model)
        assert np.abs(discrete_step(x, u, None, model, 0.02) - xe).max() <= 1e-6


def test_batched_step_matches_loop(model, rng):
    X = np.array([random_driving_state(rng) for _ in range(5)])
    U = np.array([random_input(rng) for _ in range(5)])
    batch = discrete_step(X, U, None, model, 0.02, substeps=2)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], discrete_step(X[i], U[i], None, model, 0.02, substeps=2))


def test_rejects_nonpositive_dt(model):
    with pytest.raises(ValueError):
        discrete_step(np.zeros(6), np.zeros(2), None, model, 0.0)


def test_frame_rotation_commutes(model, rng):
    for _ in range(10):
        x, u, phi = random_driving_state(rng), random_input(rng), rng.uniform(-np.pi, np.pi)
        R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        xr = x.copy()
        xr[:2] = R @ x[:2]
        xr[2] += phi
        a = discrete_step(x, u, None, model, 0.02, substeps=2)
        b = discrete_step(xr, u, None, model, 0.02, substeps=2)
        np.testing.assert_allclose(b[:2], R @ a[:2], atol=1e-9)
        np.testing.assert_allclose(b[2], a[2] + phi, atol=1e-9)
        np.testing.assert_allclose(b[3:], a[3:], atol=1e-9)


def test_coasting_never_accelerates(model):
    x = np.array([0, 0, 0, 2.0, 0, 0])
    prev = x[3]
    steps = 0
    while prev > 0.0:
        x = discrete_step(x, np.zeros(2), None, model, 0.01)
        assert x[3] <= prev
        prev = x[3]
        steps += 1
    # friction alone brings the car to rest in finite time
    assert 0 < steps < 5000


# --- discrete Jacobians ----------------------------------------------------

def test_discrete_jacobians_match_central_differences(model, rng):
    p = model.to_vector()
    worst = 0.0
    for _ in range(100):
        x, u, w = random_driving_state(rng), random_input(rng), rng.normal(scale=1e-3, size=6)
        _, Fx, Fu, Fw, Fp = dynamics_jacobians(x, u, w, model, 0.02, substeps=2)
        for J, fun, z, h in [
            (Fx, lambda z: discrete_step(z, u, w, model, 0.02, substeps=2), x, 1e-6),
            (Fu, lambda z: discrete_step(x, z, w, model, 0.02, substeps=2), u, 1e-6),
            (Fp, lambda z: discrete_step(x, u, w, z, 0.02, substeps=2), p, 1e-7),
        ]:
            Jfd = central_difference(fun, z, h)
            worst = max(worst, np.abs(J - Jfd).max() / max(np.abs(Jfd).max(), 1.0))
        np.testing.assert_array_equal(Fw, np.eye(6))
    assert worst <= 1e-5


def test_standstill_jacobian_is_linearisation(model):
    dt = 0.02
    _, Fx, _, _, Fp = dynamics_jacobians(np.zeros(6), np.zeros(2), None, model, dt)
    A, _, _ = continuous_jacobians(np.zeros(6), np.zeros(2), model)
    Fd = central_difference(lambda z: discrete_step(z, np.zeros(2), None, model, dt), np.zeros(6))
    # friction jumps at v_x = 0, so differences across it are meaningless in that column
    keep = [0, 1, 2, 4, 5]
    np.testing.assert_allclose(Fx[:, keep], Fd[:, keep], atol=1e-8)
    np.testing.assert_allclose(Fx, np.eye(6) + dt * A, atol=dt ** 2 * np.abs(A).max() ** 2)
    np.testing.assert_array_equal(Fp[:, MODEL_PARAM_NAMES.index("m")], np.zeros(6))
