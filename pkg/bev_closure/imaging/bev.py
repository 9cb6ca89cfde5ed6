import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import cv2
import numpy as np

from bev_closure.errors import DegenerateGeometryError
from bev_closure.mapping.local_mapper import LocalMap

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.5
# 正規化後の相対密度がこれ未満の画素は0にする
DENSITY_CUTOFF = 0.05


@dataclass(frozen=True, eq=False)
class DensityImage:
    """
    地面に揃えたローカルマップの鳥瞰密度画像

    counts / intensity は (H, W) 配列で [v, u] の順に引く。
    """

    width: int
    height: int
    resolution: float
    origin_cell: Tuple[int, int]
    counts: np.ndarray
    intensity: np.ndarray
    degenerate: bool = False
    map_index: int = -1

    @property
    def gray(self) -> np.ndarray:
        """特徴抽出用の8bit表現（四捨五入）"""
        return np.floor(255.0 * self.intensity + 0.5).astype(np.uint8)

    def pixel_to_metric(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        origin = np.asarray(self.origin_cell, dtype=np.float64)
        return (uv + 0.5 + origin) * self.resolution


def project(local_map: Union[LocalMap, np.ndarray], resolution: float = DEFAULT_RESOLUTION) -> DensityImage:
    if resolution <= 0:
        raise ValueError(f"BEV resolution must be positive, got {resolution}")
    if isinstance(local_map, LocalMap):
        points, map_index = local_map.points, local_map.index
    else:
        points, map_index = np.asarray(local_map, dtype=np.float64).reshape(-1, 3), -1
    if len(points) == 0:
        raise DegenerateGeometryError("empty local map")

    cells = np.floor(points[:, :2] / resolution).astype(np.int64)
    origin = cells.min(axis=0)
    pixels = cells - origin
    width = int(pixels[:, 0].max()) + 1
    height = int(pixels[:, 1].max()) + 1

    counts = np.bincount(pixels[:, 1] * width + pixels[:, 0], minlength=width * height)
    counts = counts.reshape(height, width)

    n_min, n_max = int(counts.min()), int(counts.max())
    if n_max == n_min:
        logger.warning("Density image has no contrast", extra={"map_index": map_index, "count": n_max})
        intensity = np.zeros((height, width))
        degenerate = True
    else:
        intensity = (counts - n_min) / float(n_max - n_min)
        intensity[intensity < DENSITY_CUTOFF] = 0.0
        degenerate = False

    return DensityImage(
        width=width,
        height=height,
        resolution=resolution,
        origin_cell=(int(origin[0]), int(origin[1])),
        counts=counts,
        intensity=intensity,
        degenerate=degenerate,
        map_index=map_index,
    )


def write_pgm(image: DensityImage, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # 画像の上方向を +y にする
    if not cv2.imwrite(str(path), np.ascontiguousarray(np.flipud(image.gray))):
        raise OSError(f"failed to write {path}")
    logger.info("Density image written", extra={"path": str(path), "map_index": image.map_index})
    return path
