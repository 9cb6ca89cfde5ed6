"""
真値の姿勢から参照用の閉ループ集合を作る

スキャン単位はキーフレーム（2 m 間隔）同士の重なりで、マップ単位はローカルマップ同士の重なりで決める。
ICP による位置合わせは行わず、真値の姿勢でそのまま重ねる。
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.spatial import cKDTree

from bev_closure.errors import EvaluationError
from bev_closure.evaluation.metrics import Pair, canonical
from bev_closure.geometry.transforms import SE3, PointCloud
from bev_closure.geometry.voxel import voxel_downsample
from bev_closure.mapping.local_mapper import LocalMap, range_filter

logger = logging.getLogger(__name__)

KEYFRAME_SPACING = 2.0
KEYFRAME_SKIP = 100
OVERLAP_THRESHOLD = 0.5
SCAN_CORRESPONDENCE_DISTANCE = 2.0
MAP_CORRESPONDENCE_DISTANCE = 1.0
KEYFRAME_VOXEL_SIZE = 1.0


@dataclass
class ReferenceClosureSet:
    scan_pairs: Set[Pair] = field(default_factory=set)
    map_pairs: Set[Pair] = field(default_factory=set)
    keyframe_spacing: float = KEYFRAME_SPACING
    skip: int = KEYFRAME_SKIP
    overlap_threshold: float = OVERLAP_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "scan_pairs": len(self.scan_pairs),
            "map_pairs": len(self.map_pairs),
            "keyframe_spacing": self.keyframe_spacing,
            "skip": self.skip,
            "overlap_threshold": self.overlap_threshold,
        }


@dataclass(eq=False)
class Keyframe:
    index: int
    position: np.ndarray
    scan_indices: List[int] = field(default_factory=list)
    chunks: List[np.ndarray] = field(default_factory=list)
    points: Optional[np.ndarray] = None
    tree: Optional[cKDTree] = None

    def finalize(self, voxel_size: float):
        merged = np.vstack(self.chunks) if self.chunks else np.zeros((0, 3))
        self.points = voxel_downsample(merged, voxel_size, 1)
        self.chunks = []
        self.tree = cKDTree(self.points) if len(self.points) else None


def check_poses(scan_indices: Sequence[int], ground_truth: Mapping[int, SE3]):
    missing = [index for index in scan_indices if index not in ground_truth]
    if missing:
        shown = ", ".join(str(index) for index in missing[:20])
        suffix = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise EvaluationError(f"ground-truth pose missing for scans: {shown}{suffix}")


def build_keyframes(
    scans: Iterable[Tuple[int, PointCloud]],
    ground_truth: Mapping[int, SE3],
    max_range: float,
    spacing: float = KEYFRAME_SPACING,
    voxel_size: float = KEYFRAME_VOXEL_SIZE,
) -> List[Keyframe]:
    """軌跡を spacing ごとに区切り、区間内のスキャンを真値の姿勢で世界座標に重ねる"""
    keyframes: List[Keyframe] = []
    current: Optional[Keyframe] = None
    for scan_index, cloud in scans:
        if scan_index not in ground_truth:
            raise EvaluationError(f"ground-truth pose missing for scans: {scan_index}")
        pose = ground_truth[scan_index]
        if current is None or np.linalg.norm(pose.translation - current.position) >= spacing:
            if current is not None:
                current.finalize(voxel_size)
            current = Keyframe(index=len(keyframes), position=pose.translation.copy())
            keyframes.append(current)
        current.scan_indices.append(scan_index)
        current.chunks.append(pose.apply(range_filter(cloud.points, max_range)))
    if current is not None:
        current.finalize(voxel_size)
    return keyframes


def keyframe_overlap(source: Keyframe, target: Keyframe, corr_dist: float = SCAN_CORRESPONDENCE_DISTANCE) -> float:
    if target.tree is None or len(source.points) == 0:
        return 0.0
    distances, _ = target.tree.query(source.points, k=1, distance_upper_bound=corr_dist)
    return float(np.count_nonzero(np.isfinite(distances)) / len(source.points))


def reference_scan_closures(
    scans: Iterable[Tuple[int, PointCloud]],
    ground_truth: Mapping[int, SE3],
    max_range: float,
    spacing: float = KEYFRAME_SPACING,
    skip: int = KEYFRAME_SKIP,
    overlap_threshold: float = OVERLAP_THRESHOLD,
    corr_dist: float = SCAN_CORRESPONDENCE_DISTANCE,
    scan_indices: Optional[Sequence[int]] = None,
) -> ReferenceClosureSet:
    """
    scans は (スキャン番号, 点群) を順に返すイテラブル。scan_indices を渡すと点群を読む前に
    真値の欠けを全て列挙して報告する。
    """
    if scan_indices is not None:
        check_poses(scan_indices, ground_truth)
    keyframes = build_keyframes(scans, ground_truth, max_range, spacing)
    result = ReferenceClosureSet(keyframe_spacing=spacing, skip=skip, overlap_threshold=overlap_threshold)
    if len(keyframes) <= skip + 1:
        return result

    positions = np.array([keyframe.position for keyframe in keyframes])
    position_tree = cKDTree(positions)
    overlapping = 0
    for later in keyframes:
        for earlier_index in sorted(position_tree.query_ball_point(later.position, max_range)):
            if later.index - earlier_index <= skip:
                continue
            earlier = keyframes[earlier_index]
            if keyframe_overlap(later, earlier, corr_dist) <= overlap_threshold:
                continue
            overlapping += 1
            for i in later.scan_indices:
                for j in earlier.scan_indices:
                    result.scan_pairs.add(canonical((i, j)))

    logger.info("Scan-level reference closures generated", extra={
        "keyframes": len(keyframes),
        "keyframe_pairs": overlapping,
        "scan_pairs": len(result.scan_pairs),
        "event": "references_generated",
    })
    return result


def _bounds_touch(a: np.ndarray, b: np.ndarray, margin: float) -> bool:
    return bool(np.all(a.min(axis=0) - margin <= b.max(axis=0)) and np.all(b.min(axis=0) - margin <= a.max(axis=0)))


def check_partition(reference_maps: Sequence[LocalMap], pipeline_maps: Sequence[LocalMap]):
    if len(reference_maps) != len(pipeline_maps):
        raise EvaluationError(
            f"partition mismatch: {len(reference_maps)} ground-truth maps vs {len(pipeline_maps)} pipeline maps"
        )
    for truth, detected in zip(reference_maps, pipeline_maps):
        if truth.index != detected.index or list(truth.scan_indices) != list(detected.scan_indices):
            raise EvaluationError(f"partition mismatch at map {detected.index}")


def reference_map_closures(
    maps: Sequence[LocalMap],
    pipeline_maps: Optional[Sequence[LocalMap]] = None,
    corr_dist: float = MAP_CORRESPONDENCE_DISTANCE,
) -> Set[Pair]:
    """真値で置いたローカルマップ同士で、corr_dist 以内の対応点が1つでもある組"""
    if pipeline_maps is not None:
        check_partition(maps, pipeline_maps)

    world = [local_map.world_points() for local_map in maps]
    trees = [cKDTree(points) if len(points) else None for points in world]
    pairs: Set[Pair] = set()
    for m in range(len(maps)):
        for n in range(m + 1, len(maps)):
            if trees[m] is None or len(world[n]) == 0:
                continue
            if not _bounds_touch(world[m], world[n], corr_dist):
                continue
            distances, _ = trees[m].query(world[n], k=1, distance_upper_bound=corr_dist)
            if np.isfinite(distances).any():
                pairs.add((maps[m].index, maps[n].index))
    return pairs


def reference_cross_closures(
    query_maps: Sequence[LocalMap],
    reference_maps: Sequence[LocalMap],
    corr_dist: float = MAP_CORRESPONDENCE_DISTANCE,
) -> Set[Pair]:
    """別セッション同士の (クエリ番号, 参照番号)。両セッションの真値が同じ世界座標系にあること"""
    reference_world = [local_map.world_points() for local_map in reference_maps]
    reference_trees = [cKDTree(points) if len(points) else None for points in reference_world]
    pairs: Set[Pair] = set()
    for query in query_maps:
        points = query.world_points()
        if len(points) == 0:
            continue
        for reference, world, tree in zip(reference_maps, reference_world, reference_trees):
            if tree is None or not _bounds_touch(points, world, corr_dist):
                continue
            distances, _ = tree.query(points, k=1, distance_upper_bound=corr_dist)
            if np.isfinite(distances).any():
                pairs.add((query.index, reference.index))
    return pairs
