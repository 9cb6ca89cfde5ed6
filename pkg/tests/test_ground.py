import math

import numpy as np
import pytest

from bev_closure.errors import DegenerateGeometryError
from bev_closure.evaluation.stress import planar_map, tilt_error
from bev_closure.geometry.transforms import SE3, rotation_about_axis
from bev_closure.mapping.ground import (
    GroundSamples,
    GroundSolveReport,
    align_local_map,
    apply_ground,
    sample_ground,
    solve_ground,
)
from bev_closure.mapping.local_mapper import LocalMap


def make_map(points: np.ndarray) -> LocalMap:
    return LocalMap(index=0, anchor_pose=SE3.identity(), points=points, scan_indices=[0], scan_poses=[SE3.identity()])


def tilted(points: np.ndarray, rng, degrees: float):
    heading = rng.uniform(0.0, 2.0 * math.pi)
    induced = rotation_about_axis(np.array([math.cos(heading), math.sin(heading), 0.0]), math.radians(degrees))
    return points @ induced.T, induced


def test_sample_picks_lowest_point_per_cell():
    samples = sample_ground(np.array([[1.0, 1.0, 0.2], [2.0, 2.0, -0.1]]))
    assert samples.points.tolist() == [[2.0, 2.0, -0.1]]


def test_sample_single_point():
    samples = sample_ground(np.array([[3.0, -4.0, 1.0]]))
    assert samples.points.tolist() == [[3.0, -4.0, 1.0]]


def test_sample_ties_keep_first_occurrence():
    points = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [3.0, 3.0, 0.5]])
    assert sample_ground(points).points.tolist() == [[1.0, 1.0, 0.0]]


def test_sample_count_matches_hash_grid(rng):
    points = np.column_stack([rng.uniform(-50, 50, 5000), rng.uniform(-50, 50, 5000), rng.normal(size=5000)])
    samples = sample_ground(points, 5.0)
    occupied = {(math.floor(x / 5.0), math.floor(y / 5.0)) for x, y, _ in points}
    assert len(samples) == len(occupied)
    assert len(samples) <= 441


def test_sample_empty_map():
    with pytest.raises(DegenerateGeometryError, match="empty local map"):
        sample_ground(np.zeros((0, 3)))


def test_flat_ground_is_fixed_point(planar_points):
    flat = planar_points.copy()
    flat[:, 2] = 0.0
    report = solve_ground(sample_ground(flat))
    assert report.iterations == 1
    assert report.transform.allclose(SE3.identity(), atol=1e-12)


def test_lifted_plane_gives_pure_translation(planar_points):
    lifted = planar_points.copy()
    lifted[:, 2] = 2.0
    report = solve_ground(sample_ground(lifted))
    assert np.allclose(report.transform.translation, [0.0, 0.0, -2.0], atol=1e-9)
    assert np.allclose(report.transform.rotation, np.eye(3), atol=1e-9)


def test_collinear_samples_rejected():
    line = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateGeometryError, match="rank-deficient"):
        solve_ground(GroundSamples(points=line, weights=np.ones(10, dtype=np.int8)))


def test_too_few_samples_rejected():
    with pytest.raises(DegenerateGeometryError):
        solve_ground(GroundSamples(points=np.eye(3)[:2], weights=np.ones(2, dtype=np.int8)))


@pytest.mark.parametrize("degrees, bound", [(10, 0.1), (30, 0.5), (50, 2.0), (60, 5.0)])
def test_tilt_recovery(rng, degrees, bound):
    errors = []
    for _ in range(10):
        points, induced = tilted(planar_map(rng), rng, degrees)
        report = solve_ground(sample_ground(points))
        errors.append(math.degrees(tilt_error(report.transform.rotation, induced)))
    assert np.mean(errors) <= bound


def test_structure_invariant_over_random_solves(rng):
    for _ in range(1000):
        count = int(rng.integers(20, 80))
        points = np.column_stack([
            rng.uniform(-40, 40, count),
            rng.uniform(-40, 40, count),
            rng.normal(0.0, 0.5, count),
        ])
        points, _ = tilted(points, rng, rng.uniform(0.0, 45.0))
        points[:, 2] += rng.uniform(-5.0, 5.0)
        transform = solve_ground(GroundSamples(points=points, weights=np.ones(count, dtype=np.int8))).transform
        assert abs(transform.translation[0]) < 1e-9
        assert abs(transform.translation[1]) < 1e-9
        assert abs(transform.yaw) < 1e-9


def test_solve_is_deterministic(rng):
    points, _ = tilted(planar_map(rng), rng, 20)
    samples = sample_ground(points)
    first, second = solve_ground(samples), solve_ground(samples)
    assert np.array_equal(first.transform.as_matrix(), second.transform.as_matrix())
    assert first.final_residual == second.final_residual


def test_aligned_map_lies_on_xy_plane(rng):
    points, _ = tilted(planar_map(rng, noise=0.0), rng, 30)
    aligned, report = align_local_map(make_map(points))

    residual = sample_ground(aligned).points[:, 2]
    assert np.sqrt(np.mean(residual ** 2)) < 0.05
    assert aligned.ground_transform is report.transform
    assert aligned.scan_indices == [0]

    again = solve_ground(sample_ground(aligned))
    assert again.transform.rotation_angle() < math.radians(0.05)
    assert abs(again.transform.translation[2]) < 0.05


def test_identity_report_leaves_map_unchanged(planar_points):
    local_map = make_map(planar_points)
    report = GroundSolveReport(transform=SE3.identity(), iterations=0, final_residual=0.0, inlier_count=0)
    assert np.array_equal(apply_ground(local_map, report).points, planar_points)


def test_report_dict_is_serializable(planar_points):
    report = solve_ground(sample_ground(planar_points))
    data = report.to_dict()
    assert set(data) == {"z", "roll", "pitch", "iterations", "final_residual", "inlier_count", "degenerate"}
    assert data["degenerate"] is False


def test_elevated_cells_are_dropped_before_convergence():
    # 地面 400 セル、屋根 40 セル (z=3.0)、高い構造 5 セル (z=8.0)
    grid = np.arange(-47.5, 50.0, 5.0)
    gx, gy = np.meshgrid(grid, grid)
    ground = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    roof = np.column_stack([np.linspace(55.0, 75.0, 40), np.full(40, 20.0), np.full(40, 3.0)])
    tower = np.column_stack([np.linspace(60.0, 80.0, 5), np.full(5, -30.0), np.full(5, 8.0)])
    points = np.vstack([ground, roof, tower])

    report = solve_ground(GroundSamples(points=points, weights=np.ones(len(points), dtype=np.int8)))

    assert report.inlier_count == 400
    assert np.max(np.abs(report.transform.apply(ground)[:, 2])) < 1e-5
    assert report.transform.rotation_angle() < 1e-6
