import logging
import math
from typing import Optional, Tuple

import numpy as np

from bev_closure.errors import DegenerateGeometryError
from bev_closure.geometry.transforms import SE2

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 200
DEFAULT_INLIER_TOLERANCE = 1.5
DEFAULT_MIN_INLIERS = 5
# 2点サンプルの最小間隔（画素）
MIN_SAMPLE_SEPARATION_PX = 2.0
COINCIDENT_EPS = 1e-12


def kabsch_umeyama_2d(src: np.ndarray, dst: np.ndarray) -> SE2:
    """Σ‖dst − (R·src + t)‖² を最小化する剛体変換（スケールは1に固定）"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if len(src) < 2:
        raise DegenerateGeometryError("Kabsch-Umeyama needs at least 2 point pairs")

    centroid_src = src.mean(axis=0)
    centroid_dst = dst.mean(axis=0)
    centered_src = src - centroid_src
    if np.max(np.linalg.norm(centered_src, axis=1)) < COINCIDENT_EPS:
        raise DegenerateGeometryError("coincident source points")

    covariance = centered_src.T @ (dst - centroid_dst)
    u, _, vt = np.linalg.svd(covariance)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, d if d != 0 else 1.0]) @ u.T

    translation = centroid_dst - rotation @ centroid_src
    return SE2(angle=math.atan2(rotation[1, 0], rotation[0, 0]), translation=translation)


def residuals(transform: SE2, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(dst - transform.apply(src), axis=1)


def ransac_se2(
    src: np.ndarray,
    dst: np.ndarray,
    rng: np.random.Generator,
    iterations: int = DEFAULT_ITERATIONS,
    inlier_tol: float = DEFAULT_INLIER_TOLERANCE,
    min_inliers: int = DEFAULT_MIN_INLIERS,
    min_separation: float = 0.0,
) -> Optional[Tuple[SE2, np.ndarray]]:
    """
    2点サンプルの RANSAC で SE2 を推定する

    戻り値は (全インライアで再推定した変換, インライアのマスク)。インライアが min_inliers 未満なら None。
    退化サンプル（2点の間隔が min_separation 未満）も反復回数に数える。
    """
    count = len(src)
    if count < 2 or count < min_inliers:
        return None

    best_mask: Optional[np.ndarray] = None
    best_count = 0
    for _ in range(iterations):
        first, second = rng.choice(count, size=2, replace=False)
        if (
            np.linalg.norm(src[first] - src[second]) < max(min_separation, COINCIDENT_EPS)
            or np.linalg.norm(dst[first] - dst[second]) < max(min_separation, COINCIDENT_EPS)
        ):
            continue
        hypothesis = kabsch_umeyama_2d(src[[first, second]], dst[[first, second]])
        mask = residuals(hypothesis, src, dst) <= inlier_tol
        inliers = int(mask.sum())
        if inliers > best_count:
            best_count = inliers
            best_mask = mask

    if best_mask is None or best_count < min_inliers:
        return None

    refined = kabsch_umeyama_2d(src[best_mask], dst[best_mask])
    final_mask = residuals(refined, src, dst) <= inlier_tol
    if int(final_mask.sum()) < min_inliers:
        return None
    return refined, final_mask
