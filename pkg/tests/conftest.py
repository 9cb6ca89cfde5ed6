import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planar_points(rng):
    """60 m 四方の水平面（ノイズ 0.02 m）"""
    return np.column_stack([
        rng.uniform(-30.0, 30.0, 3000),
        rng.uniform(-30.0, 30.0, 3000),
        rng.normal(0.0, 0.02, 3000),
    ])
