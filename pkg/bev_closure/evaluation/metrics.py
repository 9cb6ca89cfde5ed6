import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Set, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from bev_closure.errors import EvaluationError
from bev_closure.geometry.transforms import SE3
from bev_closure.mapping.local_mapper import LocalMap

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]

DEFAULT_FITNESS_DISTANCE = 1.0


@dataclass(frozen=True)
class PrPoint:
    gamma: int
    precision: float
    recall: float
    f1: float
    true_positives: int = 0
    detections: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def canonical(pair: Pair) -> Pair:
    a, b = int(pair[0]), int(pair[1])
    return (a, b) if a <= b else (b, a)


def _f1(precision: float, recall: float) -> float:
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def dedupe_detections(detections: Iterable[Tuple[int, int, int]], symmetric: bool = True) -> Dict[Pair, int]:
    """同じ組の検出は最大インライア数を残す"""
    best: Dict[Pair, int] = {}
    for a, b, inliers in detections:
        key = canonical((a, b)) if symmetric else (int(a), int(b))
        best[key] = max(best.get(key, 0), int(inliers))
    return best


def pr_curve(
    detections: Iterable[Tuple[int, int, int]],
    references: Set[Pair],
    symmetric: bool = True,
) -> List[PrPoint]:
    """
    インライア閾値 γ を検出値の大きい順に下げながら precision / recall を計算する

    detections は (a, b, inliers) の列。検出が1つもない場合は P=1, R=0 の1点を返す。
    symmetric=False はセッション間の (クエリ, 参照) の組を向き付きで比べる。
    """
    references = {canonical(pair) if symmetric else (int(pair[0]), int(pair[1])) for pair in references}
    if not references:
        raise EvaluationError("reference set is empty")

    scored = dedupe_detections(detections, symmetric)
    if not scored:
        return [PrPoint(gamma=0, precision=1.0, recall=0.0, f1=0.0)]

    points = []
    for gamma in sorted(set(scored.values()), reverse=True):
        selected = [pair for pair, inliers in scored.items() if inliers >= gamma]
        true_positives = sum(1 for pair in selected if pair in references)
        precision = true_positives / len(selected)
        recall = true_positives / len(references)
        points.append(PrPoint(
            gamma=gamma,
            precision=precision,
            recall=recall,
            f1=_f1(precision, recall),
            true_positives=true_positives,
            detections=len(selected),
        ))
    return points


def ap(points: List[PrPoint]) -> float:
    """γ の降順に台形則で積分する。先頭点の precision で recall=0 を補う"""
    if not points:
        return 0.0
    area = 0.0
    previous_recall, previous_precision = 0.0, points[0].precision
    for point in points:
        area += (point.recall - previous_recall) * (point.precision + previous_precision) / 2.0
        previous_recall, previous_precision = point.recall, point.precision
    return float(min(1.0, max(0.0, area)))


def r_at_full_precision(points: List[PrPoint]) -> float:
    perfect = [point.recall for point in points if point.detections > 0 and point.true_positives == point.detections]
    return max(perfect) if perfect else 0.0


def max_f1(points: List[PrPoint]) -> float:
    return max((point.f1 for point in points), default=0.0)


def summarize(points: List[PrPoint]) -> dict:
    return {
        "ap": ap(points),
        "r_at_1": r_at_full_precision(points),
        "f1_max": max_f1(points),
    }


def _points_of(cloud: Union[LocalMap, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, LocalMap):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def relative_fitness(
    map_q: Union[LocalMap, np.ndarray],
    map_r: Union[LocalMap, np.ndarray],
    transform: SE3,
    corr_dist: float = DEFAULT_FITNESS_DISTANCE,
) -> float:
    """transform でクエリ点を参照座標系に移したとき、corr_dist 以内に参照点を持つ割合"""
    query = _points_of(map_q)
    reference = _points_of(map_r)
    if len(query) == 0 or len(reference) == 0:
        raise EvaluationError("relative fitness needs non-empty maps")

    tree = cKDTree(reference)
    distances, _ = tree.query(transform.apply(query), k=1, distance_upper_bound=corr_dist)
    return float(np.count_nonzero(np.isfinite(distances)) / len(query))
