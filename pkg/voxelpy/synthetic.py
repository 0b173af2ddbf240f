#! /usr/bin/env python3
# Copyright (c) oatsu
"""
学習と試験に使う人工的な点群を作るモジュールです。
平面、球面、立方体、一様ノイズ、ブロックの境界をまたぐ斜めの面。
"""

from pathlib import Path

import numpy as np

from voxelpy.errors import ParameterError
from voxelpy.pointcloud import PointCloud, VoxelBlock

KINDS = ('plane', 'sphere', 'cube', 'noise', 'border')


def plane_blocks(count: int, side: int = 16, seed: int = 0) -> list[VoxelBlock]:
    """
    軸に垂直な平面を1枚含むブロックを count 個作る。
    平面の向きと位置は乱数で決める。
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(count):
        block = VoxelBlock(side)
        axis = int(rng.integers(3))
        position = int(rng.integers(side))
        index = [slice(None)] * 3
        index[axis] = position
        block.occupancy[tuple(index)] = 1
        blocks.append(block)
    return blocks


def noise_block(side: int, density: float, seed: int = 0) -> VoxelBlock:
    """各ボクセルが確率 density で占有されるブロック"""
    if not 0 <= density <= 1:
        raise ParameterError(f'density must be in [0, 1]: {density}')
    rng = np.random.default_rng(seed)
    return VoxelBlock(side, (rng.random((side,) * 3) < density).astype(np.uint8))


def solid_cube(side: int, lo: int, hi: int) -> VoxelBlock:
    """[lo, hi)³ が占有されたブロック"""
    block = VoxelBlock(side)
    block.occupancy[lo:hi, lo:hi, lo:hi] = 1
    return block


def sphere_cloud(depth: int, n_points: int = 20000, radius: float = 0.45,
                 seed: int = 0) -> PointCloud:  # fmt: skip
    """
    中心がグリッドの中央、半径 radius * 2**depth の球面上の点群。
    """
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    size = 2**depth
    points = np.floor(size / 2 + directions * radius * size).astype(np.int64)
    return PointCloud(np.clip(points, 0, size - 1), depth)


def random_cloud(depth: int, density: float, n_blocks: int = 2, seed: int = 0) -> PointCloud:
    """
    ランダムに選んだ n_blocks 個の 64 ブロックを、密度 density の一様ノイズで埋めた点群。
    空のブロックにならないように各ブロックに少なくとも1点は置く。
    """
    if not 0 < density <= 1:
        raise ParameterError(f'density must be in (0, 1]: {density}')
    rng = np.random.default_rng(seed)
    per_axis = 2 ** max(depth - 6, 0)
    n_blocks = min(n_blocks, per_axis**3)
    keys = rng.choice(per_axis**3, size=n_blocks, replace=False)
    parts = []
    block_side = min(64, 2**depth)
    for key in keys:
        origin = np.array(np.unravel_index(int(key), (per_axis,) * 3)) * block_side
        occupancy = rng.random((block_side,) * 3) < density
        if not occupancy.any():
            occupancy[tuple(rng.integers(block_side, size=3))] = True
        parts.append(np.argwhere(occupancy) + origin)
    return PointCloud(np.concatenate(parts), depth)


def border_surface_cloud(depth: int = 8, seed: int = 0, thickness: int = 1) -> PointCloud:
    """
    z = a*x + b*y + c の斜めの面。64 ブロックの境界をまたいで続く疎な面になる。
    """
    rng = np.random.default_rng(seed)
    size = 2**depth
    a, b = rng.uniform(-0.5, 0.5, size=2)
    c = size / 2
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    zs = np.floor(a * xs + b * ys + c).astype(np.int64)
    layers = [
        np.stack([xs.reshape(-1), ys.reshape(-1), (zs + t).reshape(-1)], axis=1)
        for t in range(thickness)
    ]
    points = np.concatenate(layers)
    inside = (points[:, 2] >= 0) & (points[:, 2] < size)
    return PointCloud(points[inside], depth)


def generate(kind: str, depth: int = 9, seed: int = 0, density: float = 0.01) -> PointCloud:
    """kind の名前から点群を1つ作る"""
    if kind == 'plane':
        size = 2**depth
        position = int(np.random.default_rng(seed).integers(size))
        ys, zs = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
        points = np.stack([np.full(ys.size, position), ys.reshape(-1), zs.reshape(-1)], axis=1)
        return PointCloud(points, depth)
    if kind == 'sphere':
        return sphere_cloud(depth, seed=seed)
    if kind == 'cube':
        size = 2**depth
        edge = min(size // 2, 64)
        return PointCloud(solid_cube(edge, 0, edge).points((size // 4,) * 3), depth)
    if kind == 'noise':
        return random_cloud(depth, density, seed=seed)
    if kind == 'border':
        return border_surface_cloud(depth, seed=seed)
    raise ParameterError(f'Unknown synthetic kind: {kind}. Choose from {", ".join(KINDS)}.')


def write_corpus(out_dir, kind: str, count: int, depth: int = 9, seed: int = 0,
                 density: float = 0.01) -> list[Path]:  # fmt: skip
    """
    人工的な点群を count 個作って PLY ファイルとして書き出す。
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        pc = generate(kind, depth=depth, seed=seed + i, density=density)
        paths.append(pc.write(out_dir / f'{kind}_{i:04d}.ply'))
    return paths
