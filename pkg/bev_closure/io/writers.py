import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from bev_closure.geometry.transforms import SE3

logger = logging.getLogger(__name__)


def write_scan(path: Union[str, Path], points: np.ndarray, intensity: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(points))
    records = np.column_stack([points, intensity]).astype("<f4")
    records.tofile(path)
    return path


def format_pose(pose: SE3) -> str:
    return " ".join(repr(float(value)) for value in pose.as_matrix()[:3, :].reshape(-1))


def write_poses(path: Union[str, Path], poses: Sequence[SE3]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_pose(pose) + "\n" for pose in poses))
    return path
