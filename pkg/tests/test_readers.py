import math

import numpy as np
import pytest

from bev_closure.errors import InputFormatError
from bev_closure.geometry.transforms import SE3
from bev_closure.io.readers import parse_pose_line, read_poses, read_scan
from bev_closure.io.writers import format_pose, write_poses, write_scan


def test_scan_file_round_trip(tmp_path, rng):
    points = rng.uniform(-50, 50, size=(100, 3)).astype(np.float32).astype(np.float64)
    intensity = rng.uniform(0, 1, 100).astype(np.float32).astype(np.float64)
    path = write_scan(tmp_path / "scans" / "000000.bin", points, intensity)

    assert path.stat().st_size == 100 * 16
    cloud = read_scan(path)
    assert np.array_equal(cloud.points, points)
    assert np.array_equal(cloud.intensity, intensity)
    assert cloud.frame == "sensor"
    assert cloud.dropped_nonfinite == 0


def test_empty_scan_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(read_scan(path)) == 0


def test_scan_length_must_be_record_multiple(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(InputFormatError, match="multiple of 16"):
        read_scan(path)


def test_non_finite_points_are_dropped(tmp_path):
    records = np.array([
        [1.0, 2.0, 3.0, 0.5],
        [np.nan, 0.0, 0.0, 0.1],
        [0.0, np.inf, 0.0, 0.1],
        [4.0, 5.0, 6.0, 0.7],
    ], dtype="<f4")
    path = tmp_path / "nan.bin"
    records.tofile(path)
    cloud = read_scan(path)
    assert cloud.points.tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    assert cloud.dropped_nonfinite == 2


def test_pose_file_round_trip(tmp_path, rng):
    poses = [SE3.from_xyz_rpy(*rng.uniform(-100, 100, 3), *rng.uniform(-math.pi, math.pi, 3)) for _ in range(10)]
    path = write_poses(tmp_path / "poses.txt", poses)
    loaded = read_poses(path)
    assert len(loaded) == 10
    for a, b in zip(loaded, poses):
        assert a.allclose(b, atol=1e-12)


def test_blank_lines_are_ignored(tmp_path):
    path = tmp_path / "poses.txt"
    line = format_pose(SE3(translation=[1.0, 2.0, 3.0]))
    path.write_text(f"{line}\n\n   \n{line}\n")
    assert len(read_poses(path)) == 2


def test_pose_line_needs_twelve_values():
    with pytest.raises(InputFormatError, match="expected 12 values, found 11"):
        parse_pose_line("1 0 0 0 0 1 0 0 0 0 1", "poses.txt:3")


def test_pose_line_rejects_garbage():
    with pytest.raises(InputFormatError, match="poses.txt:1"):
        parse_pose_line("1 0 0 0 0 1 0 0 0 0 1 x", "poses.txt:1")
    with pytest.raises(InputFormatError, match="non-finite"):
        parse_pose_line("1 0 0 nan 0 1 0 0 0 0 1 0", "poses.txt:1")


def test_slightly_skewed_rotation_is_repaired():
    pose = parse_pose_line("1.0000005 0 0 1 0 1 0 2 0 0 1 3", "p:1")
    assert np.allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)
    assert pose.translation.tolist() == [1.0, 2.0, 3.0]


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(InputFormatError, match="not orthonormal"):
        parse_pose_line("2 0 0 0 0 1 0 0 0 0 1 0", "p:1")
