import logging
from typing import Dict, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

VoxelKey = Tuple[int, int, int]


def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64)


def _flat_keys(keys: np.ndarray) -> np.ndarray:
    """整数3次元インデックスを1次元キーに詰める"""
    shifted = keys - keys.min(axis=0)
    extent = shifted.max(axis=0) + 1
    return (shifted[:, 0] * extent[1] + shifted[:, 1]) * extent[2] + shifted[:, 2]


def _group_ranks(flat: np.ndarray) -> np.ndarray:
    """同じキーの中での入力順の順位（0始まり）"""
    count = len(flat)
    order = np.argsort(flat, kind="stable")
    sorted_keys = flat[order]
    group_start = np.ones(count, dtype=bool)
    group_start[1:] = sorted_keys[1:] != sorted_keys[:-1]
    start_positions = np.flatnonzero(group_start)
    group_id = np.cumsum(group_start) - 1
    rank = np.empty(count, dtype=np.int64)
    rank[order] = np.arange(count) - start_positions[group_id]
    return rank


def first_per_voxel(points: np.ndarray, resolution: float, max_per_voxel: int) -> np.ndarray:
    """各ボクセルで入力順に先頭 max_per_voxel 個を残すインデックス（昇順）"""
    if resolution <= 0:
        raise ValueError(f"voxel resolution must be positive, got {resolution}")
    if max_per_voxel < 1:
        raise ValueError(f"max_per_voxel must be >= 1, got {max_per_voxel}")
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    rank = _group_ranks(_flat_keys(voxel_keys(points, resolution)))
    return np.flatnonzero(rank < max_per_voxel)


def voxel_downsample(points: np.ndarray, resolution: float, max_per_voxel: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[first_per_voxel(points, resolution, max_per_voxel)]


class VoxelGrid:
    """
    点数上限付きボクセルグリッド。挿入順で先着した点を保持する

    ボクセルごとの点数を辞書で持ち、追加時は新しい点だけを見る。
    """

    def __init__(self, resolution: float, max_points_per_voxel: int = 20):
        if resolution <= 0:
            raise ValueError(f"voxel resolution must be positive, got {resolution}")
        if max_points_per_voxel < 1:
            raise ValueError(f"max_points_per_voxel must be >= 1, got {max_points_per_voxel}")
        self.resolution = resolution
        self.max_points_per_voxel = max_points_per_voxel
        self._counts: Dict[VoxelKey, int] = {}
        self._chunks: List[np.ndarray] = []
        self._size = 0

    def add_points(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return
        if not np.all(np.isfinite(points)):
            raise ValueError("refusing to store non-finite points")

        keys = voxel_keys(points, self.resolution)
        _, first_index, inverse = np.unique(_flat_keys(keys), return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        unique_keys = [tuple(key) for key in keys[first_index].tolist()]
        existing = np.array([self._counts.get(key, 0) for key in unique_keys], dtype=np.int64)

        keep = _group_ranks(inverse) + existing[inverse] < self.max_points_per_voxel
        added = np.bincount(inverse[keep], minlength=len(unique_keys))
        for key, before, count in zip(unique_keys, existing.tolist(), added.tolist()):
            if count:
                self._counts[key] = before + count

        kept = points[keep]
        if len(kept):
            self._chunks.append(kept)
            self._size += len(kept)

    def point_cloud(self) -> np.ndarray:
        if not self._chunks:
            return np.zeros((0, 3))
        if len(self._chunks) > 1:
            self._chunks = [np.vstack(self._chunks)]
        return self._chunks[0].copy()

    def clear(self):
        self._counts = {}
        self._chunks = []
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def num_voxels(self) -> int:
        return len(self._counts)

    @property
    def cells(self) -> Dict[VoxelKey, List[np.ndarray]]:
        points = self.point_cloud()
        cells: Dict[VoxelKey, List[np.ndarray]] = {}
        for key, point in zip(map(tuple, voxel_keys(points, self.resolution).tolist()), points):
            cells.setdefault(key, []).append(point)
        return cells
