import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import cv2
import numpy as np

from bev_closure.imaging.bev import DensityImage

logger = logging.getLogger(__name__)

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
PATCH_RADIUS = 15
BORDER = 16
MIN_IMAGE_SIZE = 32
DEFAULT_FAST_THRESHOLD = 20
DEFAULT_MAX_FEATURES = 500
DEFAULT_PRUNE_THRESHOLD = 35

# 比較ペアの乱数シード。変更すると既存データベースと互換性がなくなる
PATTERN_SEED = 0x0B5E_2025

POPCOUNT = np.array([bin(value).count("1") for value in range(256)], dtype=np.uint16)


def _generate_pattern(seed: int, pairs: int = DESCRIPTOR_BITS, radius: int = PATCH_RADIUS) -> np.ndarray:
    """半径 radius の円内に収まる比較ペア (x1, y1, x2, y2)"""
    rng = np.random.default_rng(seed)
    sigma = (2 * radius + 1) / 5.0
    pattern = []
    while len(pattern) < pairs:
        x1, y1, x2, y2 = np.rint(rng.normal(0.0, sigma, size=4)).astype(int)
        if x1 * x1 + y1 * y1 > radius * radius or x2 * x2 + y2 * y2 > radius * radius:
            continue
        if x1 == x2 and y1 == y2:
            continue
        pattern.append((x1, y1, x2, y2))
    table = np.array(pattern, dtype=np.int64)
    table.setflags(write=False)
    return table


SAMPLING_PATTERN = _generate_pattern(PATTERN_SEED)

_dy, _dx = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_disk = _dx ** 2 + _dy ** 2 <= PATCH_RADIUS ** 2
DISK_OFFSETS = np.column_stack([_dx[_disk], _dy[_disk]])


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    orientation: float
    response: float


@dataclass(frozen=True, eq=False)
class BinaryDescriptor:
    bits: np.ndarray
    keypoint: Keypoint
    map_index: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if bits.shape[0] != DESCRIPTOR_BYTES:
            raise ValueError(f"descriptor must have {DESCRIPTOR_BITS} bits, got {bits.shape[0] * 8}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def bit(self, index: int) -> int:
        return bit_at(self.bits, index)


def bit_at(bits: np.ndarray, index: int) -> int:
    """ビット番号は np.packbits と同じビッグエンディアン"""
    return (int(bits[index >> 3]) >> (7 - (index & 7))) & 1


def stack_bits(descriptors: Sequence[BinaryDescriptor]) -> np.ndarray:
    if not descriptors:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return np.stack([d.bits for d in descriptors])


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_to_many(query: np.ndarray, stored: np.ndarray) -> np.ndarray:
    return POPCOUNT[np.bitwise_xor(stored, query[None, :])].sum(axis=1)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return POPCOUNT[np.bitwise_xor(a[:, None, :], b[None, :, :])].sum(axis=2)


def _fast_keypoints(gray: np.ndarray, threshold: int) -> np.ndarray:
    detector = cv2.FastFeatureDetector_create(
        threshold=int(threshold),
        nonmaxSuppression=True,
        type=cv2.FAST_FEATURE_DETECTOR_TYPE_9_16,
    )
    keypoints = detector.detect(gray, None)
    if not keypoints:
        return np.zeros((0, 3))
    return np.array([(kp.pt[0], kp.pt[1], kp.response) for kp in keypoints], dtype=np.float64)


def intensity_centroid_orientation(gray: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    patch = gray[v[:, None] + DISK_OFFSETS[None, :, 1], u[:, None] + DISK_OFFSETS[None, :, 0]].astype(np.float64)
    m10 = patch @ DISK_OFFSETS[:, 0]
    m01 = patch @ DISK_OFFSETS[:, 1]
    angles = np.arctan2(m01, m10)
    angles[angles <= -math.pi] = math.pi
    return angles


def _describe(smoothed: np.ndarray, u: np.ndarray, v: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    x1, y1, x2, y2 = (SAMPLING_PATTERN[:, k][None, :] for k in range(4))
    rx1 = np.rint(c * x1 - s * y1).astype(np.int64)
    ry1 = np.rint(s * x1 + c * y1).astype(np.int64)
    rx2 = np.rint(c * x2 - s * y2).astype(np.int64)
    ry2 = np.rint(s * x2 + c * y2).astype(np.int64)
    first = smoothed[v[:, None] + ry1, u[:, None] + rx1]
    second = smoothed[v[:, None] + ry2, u[:, None] + rx2]
    return np.packbits(first < second, axis=1)


def detect_and_describe(
    image: DensityImage,
    fast_threshold: int = DEFAULT_FAST_THRESHOLD,
    max_features: int = DEFAULT_MAX_FEATURES,
) -> List[BinaryDescriptor]:
    """
    単一スケールのORB相当の特徴を抽出する

    FASTでコーナーを検出し、強度重心で向きを決め、回転させた256ペアの比較でビット列を作る。
    """
    gray = image.gray
    height, width = gray.shape
    if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
        logger.warning("Density image smaller than the descriptor patch", extra={
            "map_index": image.map_index,
            "width": width,
            "height": height,
        })
        return []
    if not gray.any():
        return []

    detected = _fast_keypoints(gray, fast_threshold)
    if len(detected) == 0:
        return []
    u = np.rint(detected[:, 0]).astype(np.int64)
    v = np.rint(detected[:, 1]).astype(np.int64)
    response = detected[:, 2]

    inside = (u >= BORDER) & (u < width - BORDER) & (v >= BORDER) & (v < height - BORDER)
    u, v, response = u[inside], v[inside], response[inside]
    if len(u) == 0:
        return []

    order = np.lexsort((u, v, -response))[:max_features]
    u, v, response = u[order], v[order], response[order]

    angles = intensity_centroid_orientation(gray, u, v)
    smoothed = cv2.GaussianBlur(gray, (7, 7), 2.0, borderType=cv2.BORDER_REFLECT_101)
    bits = _describe(smoothed, u, v, angles)

    descriptors = [
        BinaryDescriptor(
            bits=bits[k],
            keypoint=Keypoint(u=float(u[k]), v=float(v[k]), orientation=float(angles[k]), response=float(response[k])),
            map_index=image.map_index,
        )
        for k in range(len(u))
    ]
    logger.debug("Features extracted", extra={"map_index": image.map_index, "count": len(descriptors)})
    return descriptors


def prune_self_similar(
    descriptors: Sequence[BinaryDescriptor],
    tau_pr: int = DEFAULT_PRUNE_THRESHOLD,
) -> List[BinaryDescriptor]:
    """同じ画像内でハミング距離が tau_pr 以下のペアは両方とも捨てる"""
    by_map: Dict[int, List[int]] = defaultdict(list)
    for position, descriptor in enumerate(descriptors):
        by_map[descriptor.map_index].append(position)

    keep = np.ones(len(descriptors), dtype=bool)
    for positions in by_map.values():
        if len(positions) < 2:
            continue
        bits = stack_bits([descriptors[p] for p in positions])
        distances = hamming_matrix(bits, bits)
        np.fill_diagonal(distances, DESCRIPTOR_BITS + 1)
        ambiguous = (distances <= tau_pr).any(axis=1)
        keep[np.asarray(positions)[ambiguous]] = False

    return [d for d, kept in zip(descriptors, keep) if kept]
