import numpy as np
import pytest

from minicar.dynamics import discrete_step
from minicar.estimation import (
    EkfModel,
    EkfState,
    EmptyOverlap,
    ExtendedKalmanFilter,
    MheConfig,
    MovingHorizonEstimator,
    SqrtWeight,
    ekf_step,
    evaluate_rmse,
    full_information_estimate,
    nearest_indices,
)
from minicar.params import NoiseLevels, default_params
from minicar.sensors import MeasurementFrame, full_measurement

DT = 1.0 / 60.0


@pytest.fixture(scope="module")
def run():
    """Noise-free drive on a gentle curve: inputs, frames and the true states."""
    th = default_params(1)
    x = np.array([0.0, 0.0, 0.3, 1.0, 0.0, 0.0])
    X, U, F = [x], [], []
    for k in range(40):
        u = np.array([0.3 * np.sin(0.05 * k), 0.3 + 0.1 * np.cos(0.03 * k)])
        F.append(full_measurement(x, u, None, th, t=k * DT))
        U.append(u)
        x = discrete_step(x, u, None, th, DT, substeps=2)
        X.append(x)
    return th, np.array(U), F, np.array(X)


# --- weights ---------------------------------------------------------------

def test_sqrt_weight_reproduces_quadratic_form(rng):
    A = rng.normal(size=(4, 4))
    W = A @ A.T + 4 * np.eye(4)
    e = rng.normal(size=(3, 4))
    valid = np.array([[1, 1, 1, 1], [1, 0, 1, 1], [0, 0, 0, 0]], bool)
    we, = SqrtWeight(W).apply(e, valid)
    for k in range(3):
        i = np.flatnonzero(valid[k])
        assert we[k] @ we[k] == pytest.approx(e[k, i] @ W[np.ix_(i, i)] @ e[k, i], abs=1e-12)


def test_sqrt_weight_rejects_bad_matrices():
    with pytest.raises(ValueError):
        SqrtWeight([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        SqrtWeight(np.diag([1.0, -1.0]))


def test_mhe_config_validation():
    with pytest.raises(ValueError):
        MheConfig.from_noise(NoiseLevels(), 1, M=0)
    with pytest.raises(ValueError):
        MheConfig.from_noise(NoiseLevels(), 1, eta=0.0)


# --- moving horizon --------------------------------------------------------

def test_first_step_is_exact_on_noise_free_data(run):
    th, U, F, X = run
    mhe = MovingHorizonEstimator(th, MheConfig.from_noise(NoiseLevels(), 1, DT), X[0])
    np.testing.assert_allclose(mhe.step(U[0], F[0]), X[1], atol=1e-9)


def test_window_grows_then_saturates(run):
    th, U, F, X = run
    mhe = MovingHorizonEstimator(th, MheConfig.from_noise(NoiseLevels(), 1, DT, M=5), X[0])
    lengths = []
    for k in range(8):
        mhe.step(U[k], F[k])
        lengths.append(mhe.last_report.window)
    assert lengths == [1, 2, 3, 4, 5, 5, 5, 5]


def test_tracks_noise_free_truth(run):
    th, U, F, X = run
    mhe = MovingHorizonEstimator(th, MheConfig.from_noise(NoiseLevels(), 1, DT, M=10), X[0])
    err = max(np.abs(mhe.step(U[k], F[k]) - X[k + 1]).max() for k in range(len(U)))
    assert err <= 1e-6


def test_weight_scaling_leaves_estimates_unchanged(run):
    th, U, F, X = run
    x0 = X[0] + np.array([0.01, -0.01, 0.01, 0.05, 0.02, 0.05])
    cfg = MheConfig.from_noise(NoiseLevels(), 1, DT, M=8)
    a = MovingHorizonEstimator(th, cfg, x0)
    b = MovingHorizonEstimator(th, cfg.scaled(10.0), x0)
    for k in range(12):
        np.testing.assert_allclose(a.step(U[k], F[k]), b.step(U[k], F[k]), atol=1e-7)


def test_full_information_equivalence_while_window_fills(run):
    th, U, F, X = run
    cfg = MheConfig.from_noise(NoiseLevels(), 1, DT, eta=1.0)
    x0 = X[0] + np.array([0.01, 0.01, 0.01, 0.05, 0.02, 0.05])
    mhe = MovingHorizonEstimator(th, cfg, x0)
    est = [mhe.step(U[k], F[k]) for k in range(20)]
    for t in (5, 20):
        Xf, rep = full_information_estimate(U[:t], F[:t], x0, cfg, th)
        np.testing.assert_allclose(Xf[-1], est[t - 1], atol=1e-7)


# --- EKF -------------------------------------------------------------------

def linear_stub(A, B, C):
    return EkfModel(lambda x, u: (A @ x + B @ u, A), lambda x, u: (C @ x, C, np.ones(len(C), bool)))


def test_ekf_matches_textbook_kalman_filter(rng):
    n, m, p = 3, 1, 2
    A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B, C = rng.normal(size=(n, m)), rng.normal(size=(p, n))
    Q, R = 0.01 * np.eye(n), 0.1 * np.eye(p)
    model = linear_stub(A, B, C)
    s = EkfState(np.zeros(n), np.eye(n))
    x, P = np.zeros(n), np.eye(n)
    for _ in range(20):
        u, y = rng.normal(size=m), rng.normal(size=p)
        s = ekf_step(s, u, MeasurementFrame(0.0, y, np.ones(p, bool)), model, Q, R)
        # standard form: gain, update, predict
        K = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
        x, P = x + K @ (y - C @ x), (np.eye(n) - K @ C) @ P
        x, P = A @ x + B @ u, A @ P @ A.T + Q
        np.testing.assert_allclose(s.x, x, atol=1e-10)
        np.testing.assert_allclose(s.P, P, atol=1e-10)


def test_ekf_without_valid_channels_only_predicts(rng):
    A, B, C = np.eye(2) + 0.1 * rng.normal(size=(2, 2)), np.ones((2, 1)), np.eye(2)
    Q = 0.01 * np.eye(2)
    s0 = EkfState(np.array([1.0, 2.0]), np.eye(2))
    s = ekf_step(s0, np.array([0.5]), MeasurementFrame(0.0, np.array([9.0, 9.0]), np.zeros(2, bool)),
                 linear_stub(A, B, C), Q, np.eye(2))
    np.testing.assert_allclose(s.x, A @ s0.x + 0.5)
    np.testing.assert_allclose(s.P, A @ A.T + Q)


def test_vehicle_ekf_converges_from_offset(run):
    th, U, F, X = run
    ekf = ExtendedKalmanFilter.from_noise(th, NoiseLevels(), X[0] + [0.02, -0.02, 0.02, 0.1, 0, 0], DT, substeps=2)
    for k in range(len(U)):
        xe = ekf.step(U[k], F[k])
    assert np.abs(xe[:3] - X[-1][:3]).max() < 5e-3


# --- evaluation ------------------------------------------------------------

def test_rmse_wraps_heading():
    r = evaluate_rmse([0.0, 1.0], [[0, 0, 3.1], [0, 0, 3.1]], [0.0, 1.0], [[0, 0, -3.1], [0, 0, -3.1]])
    assert r["rmse"][2] == pytest.approx(2 * np.pi - 6.2, abs=1e-12)
    assert r["rmse"][2] == pytest.approx(0.0832, abs=1e-4)


def test_rmse_uses_nearest_estimate_inside_span():
    est_t = [0.0, 0.1, 0.2]
    est = [[0.0], [1.0], [2.0]]
    r = evaluate_rmse(est_t, est, [0.04, 0.16, 0.5], [[0.0], [2.0], [9.0]], angle_columns=())
    assert r["n"] == 2 and r["rmse"][0] == 0.0


def test_nearest_indices_ties_go_left():
    np.testing.assert_array_equal(nearest_indices([0.05, 0.06, -1.0, 5.0], [0.0, 0.1]), [0, 1, 0, 1])


def test_rmse_empty_overlap():
    with pytest.raises(EmptyOverlap):
        evaluate_rmse([0.0, 1.0], np.zeros((2, 6)), [2.0, 3.0], np.zeros((2, 6)))
    with pytest.raises(EmptyOverlap):
        evaluate_rmse([], np.zeros((0, 6)), [2.0], np.zeros((1, 6)))
