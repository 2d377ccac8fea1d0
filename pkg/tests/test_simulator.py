import numpy as np
import pytest

from minicar.params import NoiseLevels, default_params
from minicar.sensors import MeasurementFrame, channel_groups, output_model
from minicar.simulator import (
    REFERENCE_DROPOUT_DURATIONS,
    ConfigError,
    DropoutWindow,
    LowLevelState,
    PidGains,
    SimConfig,
    inject_dropout,
    log_to_dataset,
    low_level_step,
    reference_dropout_windows,
    run_closed_loop,
    velocity_feedforward,
)

THETA = default_params(1)


class ConstantController:
    def __init__(self, command, mode="torque"):
        self.command = np.asarray(command, float)
        self.mode = mode
        self.calls = []

    def step(self, x, t=0.0):
        self.calls.append(t)
        return self.command


class RampController(ConstantController):
    def step(self, x, t=0.0):
        self.calls.append(t)
        return np.array([0.1 * np.sin(3 * t), 0.2 + 0.2 * np.sin(5 * t)])


class RecordingEstimator:
    def __init__(self):
        self.estimate = np.zeros(6)
        self.inputs, self.frames = [], []

    def step(self, u, frame):
        self.inputs.append(np.array(u))
        self.frames.append(frame)
        return self.estimate


def quiet(**kw):
    return SimConfig(theta_true=THETA, **kw)


# --- configuration ---------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(imu_rate=7.0), dict(duration=0.0), dict(lh_rate=-50.0),
                                dict(x0=(0.0, 0.0)), dict(base_rate=1000.0, estimator_rate=60.0)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        quiet(**kw)


def test_dropout_window_validation():
    with pytest.raises(ConfigError):
        DropoutWindow(1.0, 0.5)
    with pytest.raises(ConfigError):
        DropoutWindow(0.0, 1.0, group="gps")


# --- multi-rate bookkeeping ------------------------------------------------

def test_rates_per_second():
    ctrl, est = RampController((0, 0)), RecordingEstimator()
    log = run_closed_loop(quiet(duration=1.0), ctrl, est)
    counts = {g: len(log.samples.t[g]) for g in ("imu", "we", "lh")}
    assert counts == {"imu": 250, "we": 250, "lh": 50}
    assert len(log.estimates_t) == 60 and len(est.frames) == 59
    assert len(ctrl.calls) == 30
    assert len(log.t) == 1501


def test_estimator_inputs_are_period_means():
    est = RecordingEstimator()
    log = run_closed_loop(quiet(duration=0.5), RampController((0, 0)), est)
    for m, u in enumerate(est.inputs, start=1):
        np.testing.assert_allclose(u, log.applied[25 * (m - 1):25 * m].mean(axis=0), atol=1e-15)


def test_frames_never_use_future_samples():
    est = RecordingEstimator()
    log = run_closed_loop(quiet(duration=1.0), RampController((0, 0)), est)
    T = 1.0 / 60.0
    lh = channel_groups(1)["lh"]
    t_lh, y_lh, _ = log.samples.arrays("lh")
    for m, f in enumerate(est.frames, start=1):
        assert f.t == pytest.approx((m - 1) * T)
        if f.mask[lh].any():
            j = np.flatnonzero(np.all(y_lh == f.y[lh], axis=1))
            assert len(j) == 1
            assert abs(t_lh[j[0]] - f.t) <= T / 2 + 1e-12
            assert t_lh[j[0]] < m * T


def test_same_seed_is_deterministic():
    a = run_closed_loop(quiet(duration=0.5, seed=3), RampController((0, 0)))
    b = run_closed_loop(quiet(duration=0.5, seed=3), RampController((0, 0)))
    c = run_closed_loop(quiet(duration=0.5, seed=4), RampController((0, 0)))
    np.testing.assert_array_equal(a.truth, b.truth)
    np.testing.assert_array_equal(a.samples.arrays("lh")[1], b.samples.arrays("lh")[1])
    assert np.abs(a.truth - c.truth).max() > 0


def test_measurement_noise_levels():
    noise = NoiseLevels()
    # at least 1e4 pooled samples per group
    log = run_closed_loop(quiet(duration=14.0, lh_rate=250.0, process_noise=False))
    # the car stays at rest, so the noise-free output is constant
    y0, _ = output_model(np.zeros(6), np.zeros(2), THETA)
    sl = channel_groups(1)
    std = noise.measurement_std(1)
    for g in ("imu", "we", "lh"):
        _, y, valid = log.samples.arrays(g)
        assert valid.all() and y.size >= 10_000
        # pool the channels of a group, each scaled by its nominal std
        z = (y - y0[sl[g]]) / std[sl[g]]
        assert np.std(z) == pytest.approx(1.0, rel=0.05)
        assert abs(np.mean(z)) < 0.1
    np.testing.assert_array_equal(log.truth[-1], np.zeros(6))


# --- low-level loop --------------------------------------------------------

def test_torque_passthrough_with_clipping():
    st = LowLevelState()
    assert low_level_step(st, (0.1, 0.4), np.zeros(4), 0.004, THETA, PidGains(1, 1), (-0.35, -0.2), (0.35, 1.0)) == (0.1, 0.4)
    assert low_level_step(st, (0.9, 2.0), np.zeros(4), 0.004, THETA, PidGains(1, 1), (-0.35, -0.2), (0.35, 1.0)) == (0.35, 1.0)


def test_velocity_feedforward_balances_friction():
    v = 1.3
    T = velocity_feedforward(v, THETA)
    m = THETA.model
    assert (m.C_m1 - m.C_m2 * v) * T == pytest.approx(m.C_d0 + m.C_d1 * v + m.C_d2 * v * v)
    assert velocity_feedforward(0.0, THETA) == 0.0


def test_velocity_mode_step_response():
    log = run_closed_loop(quiet(duration=4.0), ConstantController((0.0, 1.0), mode="velocity"))
    assert log.truth[-1, 3] == pytest.approx(1.0, abs=0.05)
    assert np.all(log.applied[:, 1] <= 1.0)


# --- dropout ---------------------------------------------------------------

def test_inject_dropout_masks_only_inside_window():
    f = MeasurementFrame(0.5, np.ones(15), np.ones(15, bool))
    w = [DropoutWindow(0.4, 0.6, "lh")]
    out = inject_dropout(f, w)
    lh = channel_groups(1)["lh"]
    assert not out.mask[lh].any() and out.mask[:7].all()
    assert inject_dropout(f, w, t=0.6) is f


def test_reference_dropout_durations():
    assert max(REFERENCE_DROPOUT_DURATIONS) == pytest.approx(1.127)
    assert np.mean(REFERENCE_DROPOUT_DURATIONS) == pytest.approx(0.753, abs=5e-4)
    ws = reference_dropout_windows()
    assert all(a.t_end <= b.t_start for a, b in zip(ws, ws[1:]))


def test_dropout_blinds_lighthouse_samples():
    ws = (DropoutWindow(0.2, 0.5),)
    log = run_closed_loop(quiet(duration=1.0, dropout=ws))
    t, _, valid = log.samples.arrays("lh")
    inside = (t >= 0.2) & (t < 0.5)
    assert not valid[inside].any() and valid[~inside].all()
    assert [e[1] for e in log.events] == ["dropout_on", "dropout_off"]


# --- offline resampling ----------------------------------------------------

def test_log_to_dataset_grid():
    log = run_closed_loop(quiet(duration=1.0), RampController((0, 0)))
    ds = log_to_dataset(log, 50.0)
    assert len(ds) == 50 and ds.dt == pytest.approx(0.02)
    np.testing.assert_array_equal(ds.truth[1], log.truth[30])
    np.testing.assert_allclose(ds.u[2], log.applied[60:90].mean(axis=0))
    with pytest.raises(ConfigError):
        log_to_dataset(log, 7.0)
