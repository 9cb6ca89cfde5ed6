import logging
import math
from pathlib import Path
from typing import List, Union

import numpy as np

from bev_closure.errors import InputFormatError
from bev_closure.geometry.transforms import SE3, PointCloud, orthonormality_error, project_to_rotation

logger = logging.getLogger(__name__)

POINT_BYTES = 16
ORTHONORMAL_EXACT = 1e-9
ORTHONORMAL_REPAIRABLE = 1e-3


def read_scan(path: Union[str, Path]) -> PointCloud:
    """リトルエンディアン float32 の (x, y, z, intensity) が並んだバイナリスキャン"""
    path = Path(path)
    size = path.stat().st_size
    if size % POINT_BYTES != 0:
        raise InputFormatError(f"{path}: byte length {size} is not a multiple of {POINT_BYTES}")

    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(raw[:, :3]), axis=1)
    dropped = int(len(raw) - finite.sum())
    if dropped:
        logger.warning("Dropped non-finite points", extra={"path": str(path), "dropped": dropped})

    return PointCloud(
        points=raw[finite, :3],
        frame="sensor",
        intensity=raw[finite, 3],
        dropped_nonfinite=dropped,
    )


def parse_pose_line(line: str, where: str) -> SE3:
    fields = line.split()
    if len(fields) != 12:
        raise InputFormatError(f"{where}: expected 12 values, found {len(fields)}")
    try:
        values = [float(field) for field in fields]
    except ValueError as e:
        raise InputFormatError(f"{where}: {e}") from e
    if not all(math.isfinite(value) for value in values):
        raise InputFormatError(f"{where}: non-finite value")

    matrix = np.eye(4)
    matrix[:3, :] = np.array(values).reshape(3, 4)
    error = orthonormality_error(matrix[:3, :3])
    if error > ORTHONORMAL_REPAIRABLE:
        raise InputFormatError(f"{where}: rotation is not orthonormal (error {error:.3g})")
    if error > ORTHONORMAL_EXACT:
        matrix[:3, :3] = project_to_rotation(matrix[:3, :3])
    return SE3.from_matrix(matrix)


def read_poses(path: Union[str, Path]) -> List[SE3]:
    """1行に 3x4 [R | t] を行優先で12個並べた姿勢ファイル（空行は無視）"""
    path = Path(path)
    poses = []
    with path.open() as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            poses.append(parse_pose_line(line, f"{path}:{line_number}"))
    return poses
