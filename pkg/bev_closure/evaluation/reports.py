"""
結果ファイルの入出力

closures.csv       : query_map, ref_map, inliers, t00..t33（T_qr の行優先16要素）
scan_closures.csv  : query_scan, ref_scan, distance, query_map, ref_map, inliers
pr_curve.csv       : gamma, precision, recall, f1（スキャン単位）
pr_curve_maps.csv  : 同じ列でマップ単位
stress.csv         : magnitude_deg, mean_error_deg, max_error_deg, trials
summary.json       : ap, r_at_1, f1_max, 閉ループ数などの要約
"""
import csv
import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from bev_closure.closures.detection import LoopClosure, ScanClosure
from bev_closure.errors import InputFormatError
from bev_closure.evaluation.metrics import PrPoint
from bev_closure.evaluation.stress import StressRow
from bev_closure.geometry.transforms import SE3

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CLOSURE_HEADER = ["query_map", "ref_map", "inliers"] + [f"t{r}{c}" for r in range(4) for c in range(4)]
SCAN_CLOSURE_HEADER = ["query_scan", "ref_scan", "distance", "query_map", "ref_map", "inliers"]
PR_HEADER = ["gamma", "precision", "recall", "f1"]
STRESS_HEADER = ["magnitude_deg", "mean_error_deg", "max_error_deg", "trials"]

PathLike = Union[str, Path]


def _write_rows(path: PathLike, header: List[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(value) if isinstance(value, float) else value for value in row])
    return path


def write_closures(path: PathLike, closures: Sequence[LoopClosure]) -> Path:
    return _write_rows(path, CLOSURE_HEADER, (closure.to_row() for closure in closures))


def write_scan_closures(path: PathLike, closures: Sequence[ScanClosure]) -> Path:
    return _write_rows(path, SCAN_CLOSURE_HEADER, (closure.to_row() for closure in closures))


def write_pr_curve(path: PathLike, points: Sequence[PrPoint]) -> Path:
    return _write_rows(path, PR_HEADER, ([p.gamma, p.precision, p.recall, p.f1] for p in points))


def write_summary(path: PathLike, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **summary}, indent=2, sort_keys=True))
    return path


def _read_rows(path: PathLike, header: List[str]) -> List[List[str]]:
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        found = next(reader, None)
        if found != header:
            raise InputFormatError(f"{path}: unexpected header {found}")
        return [row for row in reader if row]


def read_scan_detections(path: PathLike) -> List[Tuple[int, int, int]]:
    """scan_closures.csv から (query_scan, ref_scan, inliers) を読む"""
    detections = []
    for line_number, row in enumerate(_read_rows(path, SCAN_CLOSURE_HEADER), start=2):
        try:
            detections.append((int(row[0]), int(row[1]), int(row[5])))
        except (ValueError, IndexError) as e:
            raise InputFormatError(f"{path}:{line_number}: malformed scan closure row") from e
    return detections


def write_stress(path: PathLike, rows: Sequence[StressRow]) -> Path:
    return _write_rows(path, STRESS_HEADER, ([r.magnitude_deg, r.mean_error_deg, r.max_error_deg, r.trials] for r in rows))


def read_closures(path: PathLike) -> List[Tuple[int, int, int, SE3]]:
    """closures.csv から (query_map, ref_map, inliers, T_qr) を読む"""
    closures = []
    for line_number, row in enumerate(_read_rows(path, CLOSURE_HEADER), start=2):
        try:
            values = [float(value) for value in row[3:19]]
            if len(values) != 16:
                raise ValueError("expected 16 transform values")
            transform = SE3.from_matrix(np.array(values).reshape(4, 4))
            closures.append((int(row[0]), int(row[1]), int(row[2]), transform))
        except (ValueError, IndexError) as e:
            raise InputFormatError(f"{path}:{line_number}: malformed closure row") from e
    return closures
