#! /usr/bin/env python3
# Copyright (c) oatsu
"""
フォルダ内の学習用ブロック (PLY) をまとめてデータ拡張する。
"""

import logging
from pathlib import Path

from voxelpy import ply
from voxelpy.errors import ParameterError
from voxelpy.pointcloud import augment, block_points_from_raw
from voxelpy.voxeldnn import SUPPORTED_BLOCK_SIZES


def augment_dir(in_dir, out_dir, block_size: int, seed: int = 0, rotation: bool = True,
                sampling: bool = True) -> list[Path]:  # fmt: skip
    """
    in_dir の各PLYファイル (ローカル座標のブロック) から拡張したブロックを作って
    out_dir に <元の名前>_v<番号>.ply として書き出す。空になったブロックは書き出さない。
    """
    if block_size not in SUPPORTED_BLOCK_SIZES:
        raise ParameterError(f'Unsupported block size: {block_size}')
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f'Input directory does not exist: {in_dir}')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for i, path_ply in enumerate(sorted(in_dir.glob('*.ply'))):
        points = block_points_from_raw(ply.read_ply(path_ply))
        if len(points) and points.max() >= block_size:
            raise ParameterError(f'{path_ply.name} does not fit into a block of {block_size}.')
        variants = augment(points, block_size, seed=seed + i, rotation=rotation,
                           sampling=sampling)  # fmt: skip
        for j, variant in enumerate(variants):
            if len(variant) == 0:
                logging.warning('%s variant %d is empty after rotation', path_ply.name, j)
                continue
            written.append(ply.write_ply(out_dir / f'{path_ply.stem}_v{j:02d}.ply', variant))
    logging.info('wrote %d augmented blocks to %s', len(written), out_dir)
    return written
