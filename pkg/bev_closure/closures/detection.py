import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from bev_closure.closures.alignment import (
    DEFAULT_INLIER_TOLERANCE,
    DEFAULT_ITERATIONS,
    DEFAULT_MIN_INLIERS,
    MIN_SAMPLE_SEPARATION_PX,
    ransac_se2,
)
from bev_closure.database.hbst import MatchPair, MatchVote
from bev_closure.geometry.transforms import SE2, SE3, se2_to_se3
from bev_closure.imaging.bev import DensityImage

logger = logging.getLogger(__name__)

DEFAULT_SCAN_DISTANCE = 10.0


@dataclass(frozen=True, eq=False)
class ClosureCandidate:
    """
    1つのクエリ画像と1つの参照画像の間のマッチ集合

    画素座標は各画像の原点セルと解像度でメートルに変換してから使う。
    """

    vote: MatchVote
    resolution: float
    query_origin: Tuple[int, int] = (0, 0)
    reference_origin: Tuple[int, int] = (0, 0)

    @property
    def query_map(self) -> int:
        return self.vote.query_map

    @property
    def reference_map(self) -> int:
        return self.vote.reference_map

    def __len__(self) -> int:
        return len(self.vote.pairs)

    def _metric(self, uv: np.ndarray, origin: Tuple[int, int]) -> np.ndarray:
        return (uv + 0.5 + np.asarray(origin, dtype=np.float64)) * self.resolution

    def query_points(self) -> np.ndarray:
        uv = np.array([(p.query.u, p.query.v) for p in self.vote.pairs], dtype=np.float64).reshape(-1, 2)
        return self._metric(uv, self.query_origin)

    def reference_points(self) -> np.ndarray:
        uv = np.array([(p.reference.u, p.reference.v) for p in self.vote.pairs], dtype=np.float64).reshape(-1, 2)
        return self._metric(uv, self.reference_origin)


@dataclass(frozen=True, eq=False)
class LoopClosure:
    query_map: int
    reference_map: int
    inliers: int
    t_bev: SE2
    t_qr: SE3
    inlier_pairs: List[MatchPair] = field(default_factory=list)

    def to_row(self) -> List:
        return [self.query_map, self.reference_map, self.inliers, *self.t_qr.as_matrix().reshape(-1).tolist()]


@dataclass(frozen=True)
class ScanClosure:
    query_scan: int
    reference_scan: int
    distance: float
    query_map: int = -1
    reference_map: int = -1
    inliers: int = 0

    def to_row(self) -> List:
        return [self.query_scan, self.reference_scan, self.distance, self.query_map, self.reference_map, self.inliers]


def compose_3d(t_bev: SE2, ground_q: SE3, ground_r: SE3) -> SE3:
    """T_qr = T_g_q⁻¹ · se3(T_bev) · T_g_r"""
    return ground_q.inverse() @ se2_to_se3(t_bev) @ ground_r


def ransac_verify(
    candidate: ClosureCandidate,
    iterations: int = DEFAULT_ITERATIONS,
    inlier_tol: float = DEFAULT_INLIER_TOLERANCE,
    gamma: int = DEFAULT_MIN_INLIERS,
    seed: int = 0,
    ground_q: Optional[SE3] = None,
    ground_r: Optional[SE3] = None,
) -> Optional[LoopClosure]:
    """
    BEV 上のマッチを2点 RANSAC で検証する

    t_bev は参照マップ（地面合わせ済み）の座標をクエリマップの座標に写す。
    乱数列は (seed, クエリ番号, 参照番号) から作るので候補ごとに独立して再現できる。
    """
    if len(candidate) < 2:
        return None

    rng = np.random.default_rng([seed, candidate.query_map, candidate.reference_map])
    result = ransac_se2(
        candidate.reference_points(),
        candidate.query_points(),
        rng,
        iterations=iterations,
        inlier_tol=inlier_tol,
        min_inliers=gamma,
        min_separation=MIN_SAMPLE_SEPARATION_PX * candidate.resolution,
    )
    if result is None:
        return None

    t_bev, mask = result
    ground_q = ground_q if ground_q is not None else SE3.identity()
    ground_r = ground_r if ground_r is not None else SE3.identity()
    closure = LoopClosure(
        query_map=candidate.query_map,
        reference_map=candidate.reference_map,
        inliers=int(mask.sum()),
        t_bev=t_bev,
        t_qr=compose_3d(t_bev, ground_q, ground_r),
        inlier_pairs=[pair for pair, kept in zip(candidate.vote.pairs, mask) if kept],
    )
    logger.info("Loop closure verified", extra={
        "query_map": closure.query_map,
        "reference_map": closure.reference_map,
        "inliers": closure.inliers,
        "matches": len(candidate),
        "event": "closure_verified",
    })
    return closure


def expand_to_scans(
    closure: LoopClosure,
    poses_q: Sequence[SE3],
    poses_r: Sequence[SE3],
    tau_d: float = DEFAULT_SCAN_DISTANCE,
    query_scans: Optional[Sequence[int]] = None,
    reference_scans: Optional[Sequence[int]] = None,
) -> List[ScanClosure]:
    """
    マップ単位の閉ループを構成スキャンの組に展開する

    poses はそれぞれのマップ座標系でのスキャン姿勢。クエリ側を t_qr⁻¹ で参照座標系に移し、
    距離が tau_d 以下の全ての組を返す。
    """
    if not poses_q or not poses_r:
        return []
    query_scans = list(query_scans) if query_scans is not None else list(range(len(poses_q)))
    reference_scans = list(reference_scans) if reference_scans is not None else list(range(len(poses_r)))

    to_reference = closure.t_qr.inverse()
    query_positions = to_reference.apply(np.array([pose.translation for pose in poses_q]))
    reference_positions = np.array([pose.translation for pose in poses_r])
    distances = cdist(query_positions, reference_positions)

    rows, cols = np.nonzero(distances <= tau_d)
    return [
        ScanClosure(
            query_scan=int(query_scans[i]),
            reference_scan=int(reference_scans[j]),
            distance=float(distances[i, j]),
            query_map=closure.query_map,
            reference_map=closure.reference_map,
            inliers=closure.inliers,
        )
        for i, j in zip(rows, cols)
    ]


class ClosureIndex:
    """検証済みの閉ループとマップごとの密度画像を保持する"""

    def __init__(self):
        self._by_query: Dict[int, List[LoopClosure]] = defaultdict(list)
        self._images: Dict[int, DensityImage] = {}

    def add(self, closure: LoopClosure):
        self._by_query[closure.query_map].append(closure)

    def add_density_image(self, image: DensityImage):
        self._images[image.map_index] = image

    def density_image(self, map_index: int) -> DensityImage:
        if map_index not in self._images:
            raise KeyError(f"no density image for map {map_index}")
        return self._images[map_index]

    def closures(self, query_map: Optional[int] = None) -> List[LoopClosure]:
        """(query_map, reference_map) 順"""
        if query_map is not None:
            return sorted(self._by_query.get(query_map, []), key=lambda c: c.reference_map)
        return [c for key in sorted(self._by_query) for c in sorted(self._by_query[key], key=lambda c: c.reference_map)]

    def top_k_closures(self, query_map: int, k: int) -> List[LoopClosure]:
        """インライア数の多い順（同数は参照番号の小さい順）"""
        ranked = sorted(self._by_query.get(query_map, []), key=lambda c: (-c.inliers, c.reference_map))
        return ranked[:k]

    def best_closure(self, query_map: int) -> Optional[LoopClosure]:
        top = self.top_k_closures(query_map, 1)
        return top[0] if top else None

    def __len__(self) -> int:
        return sum(len(closures) for closures in self._by_query.values())
