import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation

from bev_closure.errors import DegenerateGeometryError
from bev_closure.geometry.transforms import SE3, ground_transform
from bev_closure.mapping.local_mapper import LocalMap

logger = logging.getLogger(__name__)

DEFAULT_CELL_SIZE = 5.0
DEFAULT_MAX_ITERATIONS = 20
DEFAULT_INLIER_DISTANCE = 0.5
DEFAULT_CONVERGENCE_EPS = 1e-4
GATE_DECAY = 0.5
MIN_INLIERS = 3
# xy特異値比がこれ未満なら共線とみなす
COLLINEARITY_RATIO = 1e-6


@dataclass(frozen=True, eq=False)
class GroundSamples:
    points: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class GroundSolveReport:
    transform: SE3
    iterations: int
    final_residual: float
    inlier_count: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "z": float(self.transform.translation[2]),
            "roll": self.transform.roll,
            "pitch": self.transform.pitch,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "inlier_count": self.inlier_count,
            "degenerate": self.degenerate,
        }


def sample_ground(local_map: Union[LocalMap, np.ndarray], cell: float = DEFAULT_CELL_SIZE) -> GroundSamples:
    """xyセルごとに最もzが低い点を1つ選ぶ（同値は先着）"""
    points = local_map.points if isinstance(local_map, LocalMap) else np.asarray(local_map, dtype=np.float64)
    if len(points) == 0:
        raise DegenerateGeometryError("empty local map")

    cells = np.floor(points[:, :2] / cell).astype(np.int64)
    cells -= cells.min(axis=0)
    cell_id = cells[:, 0] * (cells[:, 1].max() + 1) + cells[:, 1]

    order = np.lexsort((np.arange(len(points)), points[:, 2], cell_id))
    sorted_cells = cell_id[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_cells[1:] != sorted_cells[:-1]
    chosen = np.sort(order[first])

    samples = points[chosen]
    return GroundSamples(points=samples, weights=np.ones(len(samples), dtype=np.int8))


def _check_geometry(points: np.ndarray):
    if len(points) < MIN_INLIERS:
        raise DegenerateGeometryError("rank-deficient ground fit")
    xy = points[:, :2] - points[:, :2].mean(axis=0)
    singular = np.linalg.svd(xy, compute_uv=False)
    if singular[0] == 0.0 or singular[-1] / singular[0] < COLLINEARITY_RATIO:
        raise DegenerateGeometryError("rank-deficient ground fit")


def solve_ground(
    samples: GroundSamples,
    max_iters: int = DEFAULT_MAX_ITERATIONS,
    inlier_dist: float = DEFAULT_INLIER_DISTANCE,
    convergence_eps: float = DEFAULT_CONVERGENCE_EPS,
) -> GroundSolveReport:
    """
    地面サンプルを局所xy平面に合わせる変換をガウス・ニュートン法で求める

    残差は変換後のz座標、ヤコビアンは [0 0 1 y' -x' 0]。
    解は常に (z, roll, pitch) の形に保つので x/y 並進とヨーは厳密に0になる。
    """
    source = np.asarray(samples.points, dtype=np.float64)
    _check_geometry(source)

    transform = SE3.identity()
    gate = max(inlier_dist, float(np.max(np.abs(source[:, 2]))))
    iterations = 0

    for iterations in range(1, max_iters + 1):
        current = transform.apply(source)
        residual = current[:, 2]
        inliers = np.abs(residual) <= gate
        if int(inliers.sum()) < MIN_INLIERS:
            logger.warning("Ground solve lost its inliers, returning identity", extra={
                "iteration": iterations,
                "inliers": int(inliers.sum()),
                "gate": gate,
            })
            return GroundSolveReport(
                transform=SE3.identity(),
                iterations=iterations,
                final_residual=float(np.sum(source[:, 2] ** 2)),
                inlier_count=int(inliers.sum()),
                degenerate=True,
            )

        selected = current[inliers]
        jacobian = np.column_stack([np.ones(len(selected)), selected[:, 1], -selected[:, 0]])
        hessian = jacobian.T @ jacobian
        gradient = jacobian.T @ residual[inliers]
        try:
            dz, d_roll, d_pitch = np.linalg.solve(hessian, -gradient)
        except np.linalg.LinAlgError as e:
            raise DegenerateGeometryError("rank-deficient ground fit") from e

        # 左からの摂動を適用し (z, roll, pitch) 族に射影する（コストは不変）
        delta = Rotation.from_rotvec([d_roll, d_pitch, 0.0]).as_matrix()
        rotation = delta @ transform.rotation
        z = float((delta @ transform.translation)[2] + dz)
        roll = math.atan2(rotation[2, 1], rotation[2, 2])
        pitch = -math.asin(max(-1.0, min(1.0, rotation[2, 0])))
        transform = ground_transform(z, roll, pitch)

        # ゲートが inlier_dist まで下がるまでは収束とみなさない
        settled = gate <= inlier_dist
        gate = max(inlier_dist, gate * GATE_DECAY)
        if settled and math.sqrt(dz * dz + d_roll * d_roll + d_pitch * d_pitch) < convergence_eps:
            break

    final = transform.apply(source)[:, 2]
    weights = np.abs(final) <= inlier_dist
    return GroundSolveReport(
        transform=transform,
        iterations=iterations,
        final_residual=float(np.sum(final[weights] ** 2)),
        inlier_count=int(weights.sum()),
    )


def apply_ground(local_map: LocalMap, report: GroundSolveReport) -> LocalMap:
    return local_map.with_points(report.transform.apply(local_map.points), report.transform)


def align_local_map(
    local_map: LocalMap,
    cell: float = DEFAULT_CELL_SIZE,
    max_iters: int = DEFAULT_MAX_ITERATIONS,
    inlier_dist: float = DEFAULT_INLIER_DISTANCE,
    convergence_eps: float = DEFAULT_CONVERGENCE_EPS,
) -> tuple:
    samples = sample_ground(local_map, cell)
    report = solve_ground(samples, max_iters, inlier_dist, convergence_eps)
    logger.info("Ground alignment solved", extra={"map_index": local_map.index, **report.to_dict()})
    return apply_ground(local_map, report), report
