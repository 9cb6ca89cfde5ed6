"""
テスト用の合成ワールドとスキャン列

corridor : 建物とポールが並ぶ通りを往復する（帰りの区間が往きの区間の再訪になる）
bridge   : 周期的な橋脚の区間を2回通過する直線走行（区間の間と前後はランダムな建物）

姿勢は厳密なので、オドメトリと真値に同じファイルを使える。
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import yaml
from scipy.spatial import cKDTree

from bev_closure.errors import ConfigError
from bev_closure.geometry.transforms import SE3, PointCloud
from bev_closure.io.manifest import SessionManifest, save_manifest
from bev_closure.io.writers import write_poses, write_scan
from bev_closure.mapping.local_mapper import ScanRecord

logger = logging.getLogger(__name__)

WORLD_KINDS = ("corridor", "bridge")
REVISIT_PLANS = ("out_and_back", "none")
FLANK_LENGTH = 40.0
POLE_HEIGHT = 5.0
POLE_RADIUS = 0.15
PILLAR_SIZE = 1.0
PILLAR_HEIGHT = 8.0
RAILING_HEIGHT = 1.0

Range = Tuple[float, float]


@dataclass
class WorldSpec:
    kind: str = "corridor"
    seed: int = 0
    length: float = 200.0
    revisit: Optional[str] = None
    scan_spacing: float = 0.8
    sensor_height: float = 1.8
    lane_offset: float = 1.5
    street_half_width: float = 9.0
    ground_density: float = 4.0
    facade_spacing: float = 0.35
    building_length: Range = (6.0, 16.0)
    building_depth: Range = (5.0, 10.0)
    building_height: Range = (6.0, 15.0)
    building_gap: Range = (2.0, 8.0)
    setback: Range = (0.0, 4.0)
    pole_spacing: float = 18.0
    max_range: float = 50.0
    keep_ratio: float = 0.35
    noise: float = 0.02
    fov_deg: float = 360.0
    oscillation_deg: float = 0.0
    oscillation_period: float = 25.0
    bridge_length: float = 80.0
    bridge_gap: float = 80.0
    bridge_period: float = 12.0

    def __post_init__(self):
        for name in ("building_length", "building_depth", "building_height", "building_gap", "setback"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                setattr(self, name, tuple(value))

    @property
    def revisit_plan(self) -> str:
        if self.revisit is not None:
            return self.revisit
        return "out_and_back" if self.kind == "corridor" else "none"

    def validate(self) -> "WorldSpec":
        if self.kind not in WORLD_KINDS:
            raise ConfigError(f"world kind must be one of {WORLD_KINDS}, got '{self.kind}'")
        if self.revisit_plan not in REVISIT_PLANS:
            raise ConfigError(f"revisit must be one of {REVISIT_PLANS}, got '{self.revisit}'")
        if self.kind == "bridge" and self.revisit_plan != "none":
            raise ConfigError("bridge worlds are a single straight pass; revisit must be 'none'")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

        positive = (
            "length", "scan_spacing", "sensor_height", "lane_offset", "street_half_width", "ground_density",
            "facade_spacing", "pole_spacing", "max_range", "oscillation_period", "bridge_length",
            "bridge_gap", "bridge_period",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("building_length", "building_depth", "building_height", "building_gap", "setback"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")
        if self.building_length[0] <= 0 or self.building_height[0] <= 0 or self.building_depth[0] <= 0:
            raise ConfigError("building dimensions must be positive")

        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if not 0.0 < self.fov_deg <= 360.0:
            raise ConfigError(f"fov_deg must be in (0, 360], got {self.fov_deg}")
        if not 0.0 <= self.oscillation_deg < 90.0:
            raise ConfigError(f"oscillation_deg must be in [0, 90), got {self.oscillation_deg}")
        if self.street_half_width <= self.lane_offset + 1.0:
            raise ConfigError("street_half_width must leave room beside the driving lanes")
        if self.kind == "bridge" and self.bridge_period >= self.bridge_length:
            raise ConfigError("bridge_period must be shorter than bridge_length")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown world spec keys: {unknown}")
        try:
            spec = cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid world spec: {e}") from e
        return spec.validate()


def load_world_spec(path: Union[str, Path]) -> WorldSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"world spec not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: world spec must be a mapping")
    return WorldSpec.from_dict(data)


@dataclass(eq=False)
class SyntheticWorld:
    spec: WorldSpec
    points: np.ndarray
    poses: List[SE3] = field(default_factory=list)
    _tree: Optional[cKDTree] = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def __len__(self) -> int:
        return len(self.poses)


def _wall(start: np.ndarray, end: np.ndarray, height: float, spacing: float) -> np.ndarray:
    length = float(np.linalg.norm(end - start))
    steps = np.linspace(0.0, 1.0, max(2, int(math.ceil(length / spacing)) + 1))
    levels = np.arange(0.0, height + 1e-9, spacing)
    s, z = np.meshgrid(steps, levels, indexing="ij")
    xy = start[None, :] + s.reshape(-1, 1) * (end - start)[None, :]
    return np.column_stack([xy, z.reshape(-1)])


def _box(x0: float, x1: float, y0: float, y1: float, height: float, spacing: float) -> np.ndarray:
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    return np.vstack([_wall(corners[k], corners[(k + 1) % 4], height, spacing) for k in range(4)])


def _buildings(spec: WorldSpec, rng: np.random.Generator, x0: float, x1: float) -> List[np.ndarray]:
    parts = []
    for side in (-1.0, 1.0):
        x = x0 + rng.uniform(*spec.building_gap)
        while x < x1:
            length = rng.uniform(*spec.building_length)
            depth = rng.uniform(*spec.building_depth)
            height = rng.uniform(*spec.building_height)
            inner = spec.street_half_width + rng.uniform(*spec.setback)
            y_near, y_far = side * inner, side * (inner + depth)
            parts.append(_box(x, min(x + length, x1), min(y_near, y_far), max(y_near, y_far), height, spec.facade_spacing))
            x += length + rng.uniform(*spec.building_gap)
    return parts


def _poles(spec: WorldSpec, rng: np.random.Generator, x0: float, x1: float) -> List[np.ndarray]:
    ring = np.linspace(0.0, 2.0 * math.pi, 8, endpoint=False)
    levels = np.arange(0.0, POLE_HEIGHT + 1e-9, spec.facade_spacing)
    parts = []
    for side in (-1.0, 1.0):
        x = x0 + rng.uniform(0.0, spec.pole_spacing)
        while x < x1:
            y = side * (spec.street_half_width - 1.0)
            a, z = np.meshgrid(ring, levels, indexing="ij")
            parts.append(np.column_stack([
                x + POLE_RADIUS * np.cos(a).reshape(-1),
                y + POLE_RADIUS * np.sin(a).reshape(-1),
                z.reshape(-1),
            ]))
            x += spec.pole_spacing * rng.uniform(0.7, 1.3)
    return parts


def _bridge(spec: WorldSpec, x0: float) -> List[np.ndarray]:
    """厳密に周期的な橋脚と手すり（どの区間でも同じ形）"""
    parts = []
    pillar_y = spec.street_half_width - 1.0
    railing_y = spec.street_half_width - 3.0
    for x in np.arange(x0 + spec.bridge_period / 2.0, x0 + spec.bridge_length, spec.bridge_period):
        for side in (-1.0, 1.0):
            y = side * pillar_y
            parts.append(_box(x - PILLAR_SIZE / 2, x + PILLAR_SIZE / 2, y - PILLAR_SIZE / 2, y + PILLAR_SIZE / 2,
                              PILLAR_HEIGHT, spec.facade_spacing))
    for side in (-1.0, 1.0):
        parts.append(_wall(np.array([x0, side * railing_y]), np.array([x0 + spec.bridge_length, side * railing_y]),
                           RAILING_HEIGHT, spec.facade_spacing))
    return parts


def _ground(spec: WorldSpec, rng: np.random.Generator, x0: float, x1: float) -> np.ndarray:
    half_width = spec.street_half_width + spec.setback[1] + spec.building_depth[1] + 2.0
    area = (x1 - x0) * 2.0 * half_width
    count = int(spec.ground_density * area)
    return np.column_stack([
        rng.uniform(x0, x1, count),
        rng.uniform(-half_width, half_width, count),
        np.zeros(count),
    ])


def _bridge_layout(spec: WorldSpec) -> Tuple[List[Tuple[float, float]], List[float]]:
    """ランダムな建物の区間と橋の開始位置"""
    flanks, bridges = [], []
    x = 0.0
    flanks.append((x, x + FLANK_LENGTH))
    x += FLANK_LENGTH
    bridges.append(x)
    x += spec.bridge_length
    flanks.append((x, x + spec.bridge_gap))
    x += spec.bridge_gap
    bridges.append(x)
    x += spec.bridge_length
    flanks.append((x, x + FLANK_LENGTH))
    return flanks, bridges


def bridge_segments(spec: WorldSpec) -> List[Tuple[float, float]]:
    """橋の区間 [開始, 終了) の x 範囲"""
    _, starts = _bridge_layout(spec)
    return [(start, start + spec.bridge_length) for start in starts]


def _trajectory_length(spec: WorldSpec) -> float:
    if spec.kind == "bridge":
        flanks, _ = _bridge_layout(spec)
        return flanks[-1][1]
    if spec.revisit_plan == "out_and_back":
        return 2.0 * spec.length + math.pi * spec.lane_offset
    return spec.length


def _trajectory_point(spec: WorldSpec, s: float) -> Tuple[float, float, float]:
    """走行距離 s での (x, y, yaw)"""
    if spec.kind == "bridge" or spec.revisit_plan == "none":
        return s, 0.0 if spec.kind == "bridge" else -spec.lane_offset, 0.0
    turn = math.pi * spec.lane_offset
    if s <= spec.length:
        return s, -spec.lane_offset, 0.0
    if s <= spec.length + turn:
        phi = (s - spec.length) / spec.lane_offset
        return (
            spec.length + spec.lane_offset * math.sin(phi),
            -spec.lane_offset * math.cos(phi),
            phi,
        )
    back = s - spec.length - turn
    return spec.length - back, spec.lane_offset, math.pi


def trajectory(spec: WorldSpec) -> List[SE3]:
    total = _trajectory_length(spec)
    amplitude = math.radians(spec.oscillation_deg)
    poses = []
    for s in np.arange(0.0, total + 1e-9, spec.scan_spacing):
        x, y, yaw = _trajectory_point(spec, float(s))
        phase = 2.0 * math.pi * s / spec.oscillation_period
        roll = amplitude * math.sin(phase)
        pitch = amplitude * math.sin(0.77 * phase + 1.0)
        poses.append(SE3.from_xyz_rpy(x, y, spec.sensor_height, roll, pitch, yaw))
    return poses


def build_world(spec: WorldSpec) -> SyntheticWorld:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    margin = spec.max_range
    parts: List[np.ndarray] = []

    if spec.kind == "corridor":
        parts.append(_ground(spec, rng, -margin, spec.length + margin))
        parts.extend(_buildings(spec, rng, -margin, spec.length + margin))
        parts.extend(_poles(spec, rng, -margin, spec.length + margin))
    else:
        flanks, bridges = _bridge_layout(spec)
        parts.append(_ground(spec, rng, -margin, flanks[-1][1] + margin))
        for start, end in flanks:
            lo = start - margin if start == 0.0 else start
            hi = end + margin if end == flanks[-1][1] else end
            parts.extend(_buildings(spec, rng, lo, hi))
        for start in bridges:
            parts.extend(_bridge(spec, start))

    points = np.vstack(parts)
    world = SyntheticWorld(spec=spec, points=points, poses=trajectory(spec))
    logger.info("Synthetic world built", extra={
        "kind": spec.kind,
        "points": len(points),
        "scans": len(world.poses),
        "event": "world_built",
    })
    return world


def simulate_scan(world: SyntheticWorld, index: int) -> PointCloud:
    """遮蔽は扱わない。センサー座標系でランダムに間引きノイズを加える"""
    spec = world.spec
    pose = world.poses[index]
    rng = np.random.default_rng([spec.seed, 1, index])

    nearby = np.sort(np.asarray(world.tree.query_ball_point(pose.translation, spec.max_range), dtype=np.int64))
    nearby = nearby[rng.random(len(nearby)) < spec.keep_ratio]
    points = pose.inverse().apply(world.points[nearby])
    if spec.noise > 0:
        points = points + rng.normal(0.0, spec.noise, size=points.shape)
    if spec.fov_deg < 360.0:
        azimuth = np.arctan2(points[:, 1], points[:, 0])
        points = points[np.abs(azimuth) <= math.radians(spec.fov_deg) / 2.0]
    return PointCloud(points=points, frame="sensor", intensity=np.zeros(len(points)))


def simulate_scans(world: SyntheticWorld) -> Iterator[ScanRecord]:
    for index, pose in enumerate(world.poses):
        yield ScanRecord(index=index, cloud=simulate_scan(world, index), pose=pose)


def generate_synthetic_world(
    spec: WorldSpec,
    output_dir: Union[str, Path],
    session_id: Optional[str] = None,
) -> SessionManifest:
    """スキャン・姿勢・真値・session.yaml を書き出す"""
    output_dir = Path(output_dir)
    world = build_world(spec)
    scan_dir = output_dir / "scans"
    for index in range(len(world)):
        cloud = simulate_scan(world, index)
        write_scan(scan_dir / f"{index:06d}.bin", cloud.points, cloud.intensity)

    pose_file = write_poses(output_dir / "poses.txt", world.poses)
    truth_file = write_poses(output_dir / "ground_truth.txt", world.poses)
    manifest = SessionManifest(
        scan_directory=scan_dir,
        pose_file=pose_file,
        ground_truth_pose_file=truth_file,
        session_id=session_id or f"{spec.kind}-{spec.seed}",
    )
    save_manifest(manifest, output_dir / "session.yaml")
    (output_dir / "world.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))

    logger.info("Synthetic session written", extra={
        "output_dir": str(output_dir),
        "scans": len(world),
        "session_id": manifest.session_id,
        "event": "synthetic_session_written",
    })
    return manifest
