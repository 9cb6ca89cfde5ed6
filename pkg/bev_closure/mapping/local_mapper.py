import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, List, Optional

import numpy as np

from bev_closure.errors import InputFormatError
from bev_closure.geometry.transforms import SE3, PointCloud
from bev_closure.geometry.voxel import VoxelGrid

logger = logging.getLogger(__name__)

MAX_POINTS_PER_VOXEL = 20


@dataclass(frozen=True, eq=False)
class ScanRecord:
    index: int
    cloud: PointCloud
    pose: SE3


@dataclass(frozen=True, eq=False)
class LocalMap:
    index: int
    anchor_pose: SE3
    points: np.ndarray
    scan_indices: List[int]
    scan_poses: List[SE3]
    ground_transform: SE3 = field(default_factory=SE3.identity)
    partial: bool = False

    def __len__(self) -> int:
        return len(self.points)

    def local_scan_poses(self) -> List[SE3]:
        """アンカー座標系でのスキャン姿勢"""
        anchor_inv = self.anchor_pose.inverse()
        return [anchor_inv @ pose for pose in self.scan_poses]

    def world_points(self) -> np.ndarray:
        return self.anchor_pose.apply(self.points)

    def with_points(self, points: np.ndarray, ground_transform: SE3) -> "LocalMap":
        return replace(self, points=points, ground_transform=ground_transform)


def range_filter(points: np.ndarray, max_range: float) -> np.ndarray:
    return points[np.linalg.norm(points, axis=1) <= max_range]


class LocalMapper:
    """走行距離が tau_c を超えるまでスキャンを集約してローカルマップを作る"""

    def __init__(self, tau_c: float, max_range: float, voxel_size: float):
        if tau_c <= 0:
            raise ValueError(f"tau_c must be positive, got {tau_c}")
        self.tau_c = tau_c
        self.max_range = max_range
        self.voxel_size = voxel_size

        self._grid = VoxelGrid(voxel_size, MAX_POINTS_PER_VOXEL)
        self._scan_indices: List[int] = []
        self._scan_poses: List[SE3] = []
        self._last_index: Optional[int] = None
        self._next_map_index = 0

    def integrate(self, scan: ScanRecord) -> Optional[LocalMap]:
        if self._last_index is not None and scan.index <= self._last_index:
            raise InputFormatError(
                f"scan indices must be strictly increasing: {scan.index} after {self._last_index}"
            )
        self._last_index = scan.index

        points = range_filter(scan.cloud.points, self.max_range)
        self._grid.add_points(scan.pose.apply(points))
        self._scan_indices.append(scan.index)
        self._scan_poses.append(scan.pose)

        displacement = np.linalg.norm(scan.pose.translation - self._scan_poses[0].translation)
        if displacement > self.tau_c:
            return self._emit(partial=False)
        return None

    def flush(self) -> Optional[LocalMap]:
        if not self._scan_indices:
            return None
        return self._emit(partial=True)

    def _emit(self, partial: bool) -> LocalMap:
        anchor = self._scan_poses[0]
        local_points = anchor.inverse().apply(self._grid.point_cloud())
        local_map = LocalMap(
            index=self._next_map_index,
            anchor_pose=anchor,
            points=local_points,
            scan_indices=list(self._scan_indices),
            scan_poses=list(self._scan_poses),
            partial=partial,
        )

        logger.info("Local map created", extra={
            "map_index": local_map.index,
            "first_scan": local_map.scan_indices[0],
            "last_scan": local_map.scan_indices[-1],
            "points": len(local_points),
            "partial": partial,
            "event": "local_map_created",
        })

        self._next_map_index += 1
        self._grid.clear()
        self._scan_indices = []
        self._scan_poses = []
        return local_map


def accumulate(
    scans: Iterable[ScanRecord],
    tau_c: float,
    max_range: float,
    voxel_size: float,
) -> Iterator[LocalMap]:
    mapper = LocalMapper(tau_c=tau_c, max_range=max_range, voxel_size=voxel_size)
    for scan in scans:
        local_map = mapper.integrate(scan)
        if local_map is not None:
            yield local_map
    trailing = mapper.flush()
    if trailing is not None:
        yield trailing
