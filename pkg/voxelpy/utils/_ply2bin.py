#! /usr/bin/env python3
# Copyright (c) oatsu
"""
PLYファイルを符号化してビットストリームのファイルにする。
"""

import csv
from pathlib import Path

from voxelpy import ply
from voxelpy.codec import EncodeResult, encode_point_cloud
from voxelpy.config import CodecConfig
from voxelpy.pointcloud import from_raw


def ply2bin(path_ply, path_bin, config: CodecConfig, models: dict | None = None,
            path_leaf_report=None) -> EncodeResult:  # fmt: skip
    """
    path_ply を config の深さで点群にして符号化し、path_bin に書き出す。
    path_leaf_report を与えるとノードごとの表を CSV で書き出す。
    """
    models = config.load_models() if models is None else models
    pc = from_raw(ply.read_ply(path_ply), config.depth)
    result = encode_point_cloud(
        pc,
        models,
        max_level=config.max_level,
        extension=config.extension,
        single_model=config.single_model,
        threads=config.threads,
    )
    result.write(path_bin)
    if path_leaf_report is not None:
        with open(Path(path_leaf_report), mode='w', encoding='utf-8', newline='') as f:
            csv.writer(f).writerows(result.leaf_table())
    return result
