import math

import numpy as np
import pytest

from bev_closure.errors import ConfigError
from bev_closure.io.manifest import load_manifest
from bev_closure.io.synthetic import (
    WorldSpec,
    bridge_segments,
    build_world,
    generate_synthetic_world,
    load_world_spec,
    simulate_scan,
    trajectory,
)

from helpers import small_world


def test_corridor_returns_along_the_other_lane():
    spec = small_world()
    poses = trajectory(spec)
    assert poses[0].translation.tolist() == pytest.approx([0.0, -1.5, 1.8])
    assert poses[-1].translation[1] == pytest.approx(1.5)
    assert poses[-1].yaw == pytest.approx(math.pi)
    steps = [np.linalg.norm(b.translation[:2] - a.translation[:2]) for a, b in zip(poses, poses[1:])]
    assert max(steps) <= spec.scan_spacing + 1e-9


def test_bridge_is_a_single_straight_pass():
    spec = WorldSpec(kind="bridge", seed=3, bridge_length=40.0, bridge_gap=40.0).validate()
    poses = trajectory(spec)
    assert all(p.translation[1] == 0.0 and p.yaw == 0.0 for p in poses)
    (a0, a1), (b0, b1) = bridge_segments(spec)
    assert a1 - a0 == b1 - b0 == 40.0
    assert b0 - a1 == 40.0


def test_oscillation_tilts_poses():
    flat = trajectory(small_world())
    tilted = trajectory(small_world(oscillation_deg=30.0))
    assert all(p.rotation_angle() == pytest.approx(0.0, abs=1e-12) for p in flat[:50])
    assert max(abs(p.roll) for p in tilted) > math.radians(20)
    assert max(abs(p.roll) for p in tilted) <= math.radians(30) + 1e-9


def test_world_is_seeded():
    a = build_world(small_world())
    b = build_world(small_world())
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(simulate_scan(a, 10).points, simulate_scan(b, 10).points)
    assert not np.array_equal(build_world(small_world(seed=8)).points, a.points)


def test_scans_respect_range_and_fov():
    world = build_world(small_world(fov_deg=70.0, noise=0.0))
    cloud = simulate_scan(world, 5)
    assert len(cloud) > 0
    assert np.linalg.norm(cloud.points, axis=1).max() <= 30.0 + 1e-9
    azimuth = np.degrees(np.arctan2(cloud.points[:, 1], cloud.points[:, 0]))
    assert np.abs(azimuth).max() <= 35.0 + 1e-9


@pytest.mark.parametrize("overrides", [
    {"kind": "forest"},
    {"kind": "bridge", "revisit": "out_and_back"},
    {"keep_ratio": 0.0},
    {"fov_deg": 400.0},
    {"oscillation_deg": 90.0},
    {"building_height": (5.0, 2.0)},
    {"street_half_width": 2.0},
])
def test_invalid_world_specs(overrides):
    with pytest.raises(ConfigError):
        WorldSpec(**overrides).validate()


def test_unknown_world_keys(tmp_path):
    path = tmp_path / "world.yaml"
    path.write_text("kind: corridor\nlanes: 3\n")
    with pytest.raises(ConfigError, match="lanes"):
        load_world_spec(path)


def test_generated_session_is_readable(tmp_path):
    spec = small_world(length=20.0)
    manifest = generate_synthetic_world(spec, tmp_path / "out")

    assert manifest.session_id == "corridor-7"
    files, poses = manifest.validate()
    assert len(files) == len(poses) == len(trajectory(spec))
    assert load_manifest(tmp_path / "out" / "session.yaml").session_id == "corridor-7"
    assert load_world_spec(tmp_path / "out" / "world.yaml").to_dict() == spec.to_dict()
    assert manifest.ground_truth()[0].allclose(poses[0], atol=1e-12)
