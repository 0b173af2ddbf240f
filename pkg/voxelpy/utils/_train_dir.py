#! /usr/bin/env python3
# Copyright (c) oatsu
"""
フォルダ内のPLYファイルからブロックを集めて VoxelDNN を学習する。
"""

import logging
from pathlib import Path

from voxelpy import ply
from voxelpy.nn import ModelWeights
from voxelpy.pointcloud import PointCloud, block_points_from_raw, extract_blocks
from voxelpy.voxeldnn import Trainer, VoxelDnnConfig, training_log_path


def load_block_dataset(in_dir, block_size: int) -> list:
    """
    in_dir のPLYファイルを整数座標の点群として読み、占有されている
    block_size のブロックをすべて集める。
    """
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f'Block directory does not exist: {in_dir}')
    blocks = []
    for path_ply in sorted(in_dir.glob('*.ply')):
        points = block_points_from_raw(ply.read_ply(path_ply))
        if len(points) == 0:
            continue
        depth = max(int(points.max()).bit_length(), 1)
        pc = PointCloud(points, depth)
        blocks += [block for _, block in extract_blocks(pc, block_size)]
    logging.info('loaded %d blocks of %d from %s', len(blocks), block_size, in_dir)
    return blocks


def train_dir(in_dir, path_weights, config: VoxelDnnConfig, seed: int = 0) -> ModelWeights:
    """
    学習して重みファイルと <重みファイル>.log を書き出す。
    """
    dataset = load_block_dataset(in_dir, config.block_size)
    trainer = Trainer(config, seed=seed)
    weights = trainer.fit(dataset)
    weights.write(path_weights)
    trainer.log.write(training_log_path(path_weights))
    logging.info('saved weights to %s', path_weights)
    return weights
