import math

import numpy as np

from bev_closure.config import PipelineConfig
from bev_closure.geometry.transforms import SE3
from bev_closure.io.synthetic import WorldSpec


def straight_poses(count: int, step: float = 1.0, y: float = 0.0):
    return [SE3(translation=[i * step, y, 0.0]) for i in range(count)]


def hamming_oracle(a: np.ndarray, b: np.ndarray) -> int:
    """ビット単位で数える素朴な実装"""
    return int(np.unpackbits(np.bitwise_xor(a, b)).sum())


def small_config(**overrides) -> PipelineConfig:
    """短い合成セッション用の設定"""
    config = PipelineConfig(tau_c=40.0, max_range=30.0)
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".")
            setattr(getattr(config, section), name, value)
        else:
            setattr(config, key, value)
    return config.validate()


def small_world(**overrides) -> WorldSpec:
    values = dict(kind="corridor", seed=7, length=120.0, scan_spacing=1.0, max_range=30.0)
    values.update(overrides)
    return WorldSpec(**values).validate()


def deg(value: float) -> float:
    return math.radians(value)
