#! /usr/bin/env python3
# Copyright (c) oatsu
"""
ビットストリームのファイルを復号してPLYファイルにする。
"""

from pathlib import Path

from voxelpy.codec import decode_point_cloud
from voxelpy.config import CodecConfig
from voxelpy.pointcloud import PointCloud


def bin2ply(path_bin, path_ply, config: CodecConfig, models: dict | None = None) -> PointCloud:
    """path_bin を復号して path_ply に書き出す"""
    models = config.load_models() if models is None else models
    pc = decode_point_cloud(Path(path_bin).read_bytes(), models)
    pc.write(path_ply)
    return pc
