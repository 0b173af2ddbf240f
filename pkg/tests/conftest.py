#! /usr/bin/env python3
# Copyright (c) oatsu
import os

import hypothesis
import numpy as np
import pytest

from voxelpy.pointcloud import PointCloud
from voxelpy.voxeldnn import VoxelDNN, VoxelDnnConfig

np.seterr(all='warn')

hypothesis.settings.register_profile('fast', max_examples=10, deadline=None)
hypothesis.settings.register_profile('full', max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'fast'))


def tiny_config(block_size: int, filters: int = 4, **kwargs) -> VoxelDnnConfig:
    """試験用の小さい VoxelDNN (カーネル 3, 残差ブロック 1)"""
    options = {'first_kernel': 3, 'residual_kernel': 3, 'residual_blocks': 1}
    options.update(kwargs)
    return VoxelDnnConfig(block_size=block_size, filters=filters, **options)


@pytest.fixture(scope='session')
def tiny_models():
    """ブロックサイズ -> 乱数で初期化した小さいモデル"""
    return {
        8: VoxelDNN(tiny_config(8), seed=8),
        16: VoxelDNN(tiny_config(16), seed=16),
        32: VoxelDNN(tiny_config(32, filters=2), seed=32),
        64: VoxelDNN(tiny_config(64, filters=2), seed=64),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sparse_cloud(depth: int, n_points: int, seed: int = 0, spread: int = 2) -> PointCloud:
    """
    原点の近くの spread × spread × spread 個の 64 ブロックにだけ点を置いた点群。
    """
    rng = np.random.default_rng(seed)
    limit = min(64 * spread, 2**depth)
    return PointCloud(rng.integers(0, limit, size=(n_points, 3)), depth)
