import numpy as np
import pytest

from minicar.lh_calibration import (
    CalibrationPoint,
    EmptySamples,
    StationPose,
    average_angles,
    calibrate_station,
    perturbed_pose,
    point_angles,
    plane_tilts_from_offsets,
    reprojection_residuals,
    residual_sweep,
    scene_grid,
    spread_order,
    synthetic_points,
    triangulate_crossing_beams,
)
from minicar.params import DEFAULT_STATION
from minicar.sensors import DegenerateGeometry

TRUTH = StationPose(DEFAULT_STATION.angles, DEFAULT_STATION.position)
OFFS = DEFAULT_STATION.tilt_offsets


def exact_points(positions=None):
    positions = scene_grid() if positions is None else positions
    return synthetic_points(DEFAULT_STATION, positions, n_samples=1, sigma=0.0, at_center=True)


# --- averaging -------------------------------------------------------------

def test_average_angles_flat_and_stacked():
    assert average_angles([0.1, 0.2, 0.3]) == pytest.approx(0.2)
    s = np.array([[[0.1, 0.2], [0.3, 0.4]], [[0.5, 0.6], [0.7, 0.8]]])
    np.testing.assert_allclose(average_angles(s), [0.4, 0.5])


def test_average_angles_empty():
    with pytest.raises(EmptySamples):
        average_angles([])


def test_calibration_point_mean():
    p = CalibrationPoint([1, 2, 0], np.array([[0.1, 0.3], [0.3, 0.5]]))
    np.testing.assert_allclose(p.mean_angles, [0.2, 0.4])


# --- pose fit --------------------------------------------------------------

def test_noise_free_recovery():
    pts = exact_points()
    init = perturbed_pose(DEFAULT_STATION, 0.1, 0.2, np.random.default_rng(3))
    res = calibrate_station(pts, init, OFFS)
    np.testing.assert_allclose(res.pose.to_vector(), TRUTH.to_vector(), atol=1e-6)
    assert np.abs(res.residuals).max() <= 1e-9


def test_truth_start_converges_immediately():
    res = calibrate_station(exact_points(), TRUTH, OFFS)
    assert res.report.converged and res.report.iterations <= 2


def test_relabeling_points_does_not_change_the_fit():
    pts = synthetic_points(DEFAULT_STATION, scene_grid(), n_samples=20, sigma=3e-4,
                           rng=np.random.default_rng(1))[:8]
    init = perturbed_pose(DEFAULT_STATION, 0.05, 0.1, np.random.default_rng(2))
    a = calibrate_station(pts, init, OFFS).pose.to_vector()
    perm = np.random.default_rng(4).permutation(len(pts))
    b = calibrate_station([pts[i] for i in perm], init, OFFS).pose.to_vector()
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_too_few_points():
    with pytest.raises(ValueError):
        calibrate_station(exact_points()[:2], TRUTH)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        StationPose((0.0, np.nan, 0.0), (0.0, 0.0, 1.0))


# --- crossing beams --------------------------------------------------------

def test_triangulation_round_trip(rng):
    tilts = plane_tilts_from_offsets((0.0, 0.0))
    for _ in range(50):
        p = np.array([*rng.uniform([-1.5, -1.0], [1.5, 1.0]), 0.0])
        ang, valid = point_angles(TRUTH.to_vector(), p, tilts)
        assert valid.all()
        np.testing.assert_allclose(triangulate_crossing_beams(ang[0], TRUTH), p, atol=1e-9)


def test_triangulation_with_tilt_offsets(rng):
    offs = (0.01, -0.02)
    tilts = plane_tilts_from_offsets(offs)
    p = np.array([0.4, -0.3, 0.05])
    ang, _ = point_angles(TRUTH.to_vector(), p, tilts)
    np.testing.assert_allclose(triangulate_crossing_beams(ang[0], TRUTH, offs, z_deck=0.05), p, atol=1e-9)


def test_vertical_ray_lands_below_station():
    # station looking straight down: its x axis maps to world -z
    pose = StationPose((0.0, np.pi / 2, 0.0), (0.3, -0.2, 2.0))
    w = triangulate_crossing_beams([0.0, 0.0], pose)
    np.testing.assert_allclose(w, [0.3, -0.2, 0.0], atol=1e-12)


def test_ray_parallel_to_deck_is_degenerate():
    pose = StationPose((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    with pytest.raises(DegenerateGeometry):
        triangulate_crossing_beams([0.0, 0.0], pose)


def test_missing_angle_is_degenerate():
    with pytest.raises(DegenerateGeometry):
        triangulate_crossing_beams([0.1, np.nan], TRUTH)


def test_reprojection_zero_at_truth():
    assert reprojection_residuals(exact_points(), TRUTH, OFFS).max() <= 1e-9


# --- scene helpers ---------------------------------------------------------

def test_spread_order_is_a_permutation_starting_at_a_corner():
    P = scene_grid()
    order = spread_order(P)
    assert sorted(order) == list(range(len(P)))
    assert np.abs(P[order[0], :2]).tolist() == [1.5, 1.0]


def test_residual_sweep_shrinks_with_more_points():
    init = perturbed_pose(DEFAULT_STATION, 0.1, 0.2, np.random.default_rng(0))
    sw = residual_sweep(DEFAULT_STATION, init, [4, 10], seed=5)
    assert sw["n_cal"] == [4, 10]
    assert sw["mean"][1] <= sw["mean"][0]
    assert sw["mean"][1] < 1e-3
