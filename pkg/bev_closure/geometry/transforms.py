import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9
# 合成がこの回数を超えたら回転行列を再直交化する
RENORMALIZE_AFTER = 1000


def wrap_angle(angle: float) -> float:
    """(-π, π] に正規化"""
    wrapped = math.atan2(math.sin(angle), math.cos(angle))
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def project_to_rotation(matrix: np.ndarray) -> np.ndarray:
    """極分解で最も近い回転行列に射影"""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthonormality_error(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def roll_pitch_rotation(roll: float, pitch: float) -> np.ndarray:
    """R = R_y(pitch) · R_x(roll)、ヨー成分は厳密に0"""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    r_x = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    r_y = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return r_y @ r_x


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    chain_length: int = 0

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("SE3 with non-finite entries")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "SE3":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SE3":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(rotation=matrix[:3, :3], translation=matrix[:3, 3])

    @classmethod
    def from_xyz_rpy(cls, x: float, y: float, z: float, roll: float, pitch: float, yaw: float) -> "SE3":
        rotation = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
        return cls(rotation=rotation, translation=[x, y, z])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: "SE3") -> "SE3":
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.translation + self.translation
        chain = self.chain_length + other.chain_length + 1
        if chain > RENORMALIZE_AFTER:
            rotation = project_to_rotation(rotation)
            chain = 0
        return SE3(rotation=rotation, translation=translation, chain_length=chain)

    def __matmul__(self, other: "SE3") -> "SE3":
        return self.compose(other)

    def inverse(self) -> "SE3":
        rotation_t = self.rotation.T
        return SE3(rotation=rotation_t, translation=-rotation_t @ self.translation, chain_length=self.chain_length)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    @property
    def pitch(self) -> float:
        return -math.asin(max(-1.0, min(1.0, self.rotation[2, 0])))

    @property
    def roll(self) -> float:
        return math.atan2(self.rotation[2, 1], self.rotation[2, 2])

    def rotation_angle(self) -> float:
        cos_angle = (np.trace(self.rotation) - 1.0) / 2.0
        return math.acos(max(-1.0, min(1.0, cos_angle)))

    def allclose(self, other: "SE3", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        return f"SE3(translation={self.translation.tolist()}, rpy=({self.roll:.6f}, {self.pitch:.6f}, {self.yaw:.6f}))"


@dataclass(frozen=True, eq=False)
class SE2:
    angle: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        translation = np.array(self.translation, dtype=np.float64).reshape(2)
        if not (math.isfinite(self.angle) and np.all(np.isfinite(translation))):
            raise ValueError("SE2 with non-finite entries")
        translation.setflags(write=False)
        object.__setattr__(self, "angle", wrap_angle(float(self.angle)))
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "SE2":
        return cls()

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "SE2") -> "SE2":
        return SE2(angle=self.angle + other.angle, translation=self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE2":
        rotation_t = self.rotation.T
        return SE2(angle=-self.angle, translation=-rotation_t @ self.translation)

    def allclose(self, other: "SE2", atol: float = 1e-9) -> bool:
        angle_diff = abs(wrap_angle(self.angle - other.angle))
        return angle_diff <= atol and bool(np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self) -> str:
        return f"SE2(angle={self.angle:.9f}, translation={self.translation.tolist()})"


def se2_to_se3(transform: SE2) -> SE3:
    return SE3(
        rotation=yaw_rotation(transform.angle),
        translation=[transform.translation[0], transform.translation[1], 0.0],
    )


def se3_to_se2(transform: SE3) -> SE2:
    """ヨーとxy並進のみを取り出す（z・ロール・ピッチは捨てる）"""
    return SE2(angle=transform.yaw, translation=transform.translation[:2])


def ground_transform(z: float, roll: float, pitch: float) -> SE3:
    return SE3(rotation=roll_pitch_rotation(roll, pitch), translation=[0.0, 0.0, z])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """センサーまたはマップ座標系の点群"""

    points: np.ndarray
    frame: str = "sensor"
    intensity: Optional[np.ndarray] = None
    dropped_nonfinite: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("point cloud contains non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return self.points.shape[0]
