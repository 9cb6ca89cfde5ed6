import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from bev_closure.geometry.transforms import rotation_about_axis
from bev_closure.mapping.ground import (
    DEFAULT_CELL_SIZE,
    DEFAULT_CONVERGENCE_EPS,
    DEFAULT_INLIER_DISTANCE,
    DEFAULT_MAX_ITERATIONS,
    sample_ground,
    solve_ground,
)
from bev_closure.mapping.local_mapper import LocalMap

logger = logging.getLogger(__name__)

DEFAULT_MAGNITUDES = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
DEFAULT_TRIALS = 10
UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class StressRow:
    magnitude_deg: float
    mean_error_deg: float
    max_error_deg: float
    trials: int

    def to_dict(self) -> dict:
        return asdict(self)


def tilt_error(estimated: np.ndarray, induced: np.ndarray) -> float:
    """R_est · R_true で ẑ がどれだけ傾いたまま残るか（ラジアン）"""
    normal = estimated @ induced @ UP
    return math.acos(max(-1.0, min(1.0, float(normal @ UP) / float(np.linalg.norm(normal)))))


def ground_alignment_stress(
    maps: Sequence[Union[LocalMap, np.ndarray]],
    magnitudes: Sequence[float] = DEFAULT_MAGNITUDES,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    cell: float = DEFAULT_CELL_SIZE,
    max_iters: int = DEFAULT_MAX_ITERATIONS,
    inlier_dist: float = DEFAULT_INLIER_DISTANCE,
    convergence_eps: float = DEFAULT_CONVERGENCE_EPS,
    rng: Optional[np.random.Generator] = None,
) -> List[StressRow]:
    """
    地面合わせ済みのマップを xy 平面内のランダムな軸まわりに傾け、ソルバーがどこまで戻せるかを測る
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    clouds = [m.points if isinstance(m, LocalMap) else np.asarray(m, dtype=np.float64) for m in maps]

    rows = []
    for magnitude in magnitudes:
        angle = math.radians(magnitude)
        errors = []
        for points in clouds:
            for _ in range(trials):
                heading = rng.uniform(0.0, 2.0 * math.pi)
                induced = rotation_about_axis(np.array([math.cos(heading), math.sin(heading), 0.0]), angle)
                report = solve_ground(
                    sample_ground(points @ induced.T, cell),
                    max_iters=max_iters,
                    inlier_dist=inlier_dist,
                    convergence_eps=convergence_eps,
                )
                errors.append(math.degrees(tilt_error(report.transform.rotation, induced)))

        row = StressRow(
            magnitude_deg=float(magnitude),
            mean_error_deg=float(np.mean(errors)) if errors else 0.0,
            max_error_deg=float(np.max(errors)) if errors else 0.0,
            trials=len(errors),
        )
        logger.info("Ground stress magnitude evaluated", extra={**row.to_dict(), "event": "stress_row"})
        rows.append(row)
    return rows


def planar_map(
    rng: np.random.Generator,
    size: float = 60.0,
    count: int = 2000,
    noise: float = 0.02,
) -> np.ndarray:
    """原点を中心とする水平な正方形の平面（z ノイズ付き）"""
    half = size / 2.0
    return np.column_stack([
        rng.uniform(-half, half, count),
        rng.uniform(-half, half, count),
        rng.normal(0.0, noise, count) if noise > 0 else np.zeros(count),
    ])
