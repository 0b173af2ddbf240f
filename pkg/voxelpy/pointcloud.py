#! /usr/bin/env python3
# Copyright (c) oatsu
"""
ボクセル化した点群とボクセルブロックを扱うモジュールです。

座標系の約束
    ラスター順は x が最も遅く、z が最も速い。
    d×d×d ブロックの i 番目 (1始まり) のボクセルは i-1 = x*d*d + y*d + z 。
    マスク、ブロックの走査順、八分木の子の順番もすべてこの順に従う。
"""

import numpy as np

from voxelpy import ply as _ply
from voxelpy.errors import ParameterError, ShapeError, UndefinedDensityError

DENSITY_BLOCK_SIZE = 64
DEFAULT_ROTATION_DEGREES = (45.0,)
DEFAULT_SAMPLING_RATES = (0.7, 0.4)


def raster_index(x: int, y: int, z: int, side: int) -> int:
    """座標からラスター順のインデックス (1始まり) を求める"""
    return x * side * side + y * side + z + 1


def raster_coords(i: int, side: int) -> tuple[int, int, int]:
    """ラスター順のインデックス (1始まり) から座標を求める"""
    if not 1 <= i <= side**3:
        raise ParameterError(f'Raster index {i} is out of range for side {side}.')
    x, rest = divmod(i - 1, side * side)
    y, z = divmod(rest, side)
    return x, y, z


class VoxelBlock:
    """
    d×d×d の2値占有ブロック。
    occupancy[x, y, z] が 1 なら占有。
    """

    def __init__(self, side: int, occupancy=None):
        self.side = int(side)
        if occupancy is None:
            occupancy = np.zeros((self.side,) * 3, dtype=np.uint8)
        occupancy = np.asarray(occupancy)
        if occupancy.shape != (self.side,) * 3:
            raise ShapeError(f'Occupancy shape {occupancy.shape} does not match side {side}.')
        if not np.isin(occupancy, (0, 1)).all():
            raise ParameterError('Occupancy values must be 0 or 1.')
        self.occupancy = occupancy.astype(np.uint8, copy=False)

    def __eq__(self, other):
        if not isinstance(other, VoxelBlock):
            return NotImplemented
        return self.side == other.side and np.array_equal(self.occupancy, other.occupancy)

    def __repr__(self):
        return f'VoxelBlock(side={self.side}, occupied={self.count})'

    @classmethod
    def from_points(cls, points, side: int):
        """ブロック内のローカル座標からブロックを作る"""
        block = cls(side)
        points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        if len(points) > 0:
            if points.min() < 0 or points.max() >= side:
                raise ParameterError(f'Points must lie inside the block of side {side}.')
            block.occupancy[points[:, 0], points[:, 1], points[:, 2]] = 1
        return block

    @property
    def count(self) -> int:
        """占有ボクセル数"""
        return int(self.occupancy.sum())

    @property
    def flat(self) -> np.ndarray:
        """ラスター順に並べた占有値"""
        return self.occupancy.reshape(-1)

    def points(self, origin=(0, 0, 0)) -> np.ndarray:
        """占有ボクセルの座標をラスター順で返す。origin を足した絶対座標にできる。"""
        return np.argwhere(self.occupancy) + np.asarray(origin, dtype=np.int64)

    def is_empty(self) -> bool:
        return not self.occupancy.any()


class PointCloud:
    """
    ボクセル化済みの点群。
    座標は 0 以上 2**depth 未満の整数で、重複はない (集合として扱う)。
    """

    def __init__(self, points, depth: int):
        depth = int(depth)
        if depth < 1:
            raise ParameterError(f'Bit depth must be >= 1: {depth}')
        points = np.asarray(points).reshape(-1, 3)
        if len(points) > 0 and not np.issubdtype(points.dtype, np.integer):
            if not np.array_equal(points, np.floor(points)):
                raise ParameterError('PointCloud coordinates must be integers.')
        points = points.astype(np.int64)
        if len(points) > 0:
            if points.min() < 0 or points.max() >= 2**depth:
                raise ParameterError(f'Coordinates must be in [0, 2**{depth}).')
            # 重複を除いてラスター順に並べる
            points = np.unique(points, axis=0)
        self.points = points
        self.depth = depth

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.depth == other.depth and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f'PointCloud(points={len(self)}, depth={self.depth})'

    def as_raw(self) -> _ply.RawPointCloud:
        """実数座標の点群として扱う"""
        return _ply.RawPointCloud(self.points.astype(np.float64))

    def write(self, path):
        """PLYファイルに書き出す"""
        return _ply.write_ply(path, self.points)


def load(path, depth: int) -> PointCloud:
    """
    PLYファイルを読み取ってボクセル化する。
    """
    return voxelize(_ply.read_ply(path), depth)


def voxelize(rpc: _ply.RawPointCloud, depth: int) -> PointCloud:
    """
    最小値を原点に寄せ、最大の辺が 2**depth - 1 になるように一様に拡大縮小し、
    四捨五入 (0.5 は切り上げ) して重複を除く。
    """
    points = rpc.points
    if len(points) == 0:
        raise ParameterError('Cannot voxelize an empty point cloud.')
    max_coord = 2**depth - 1
    minimum = points.min(axis=0)
    extent = float((points.max(axis=0) - minimum).max())
    if extent == 0:
        # 全部同じ点のときはすべて原点に置く
        quantized = np.zeros_like(points, dtype=np.int64)
    else:
        scaled = (points - minimum) / extent * max_coord
        quantized = np.floor(scaled + 0.5).astype(np.int64)
    quantized = np.clip(quantized, 0, max_coord)
    return PointCloud(quantized, depth)


def local_density(pc: PointCloud) -> float:
    """
    占有されている 64 ブロックごとの占有率 (%) の平均。
    """
    if len(pc) == 0:
        raise UndefinedDensityError('Local density is undefined for an empty point cloud.')
    keys = pc.points // DENSITY_BLOCK_SIZE
    _, counts = np.unique(keys, axis=0, return_counts=True)
    percentages = 100.0 * counts.astype(np.float64) / DENSITY_BLOCK_SIZE**3
    return float(percentages.sum() / len(counts))


def extract_blocks(pc: PointCloud, side: int) -> list[tuple[tuple[int, int, int], VoxelBlock]]:
    """
    点群を side のブロックに分割して、占有されているブロックだけを
    原点のラスター順に返す。
    """
    if len(pc) == 0:
        return []
    keys = pc.points // side
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind='stable')
    bounds = np.searchsorted(inverse[order], np.arange(len(unique_keys) + 1))
    blocks = []
    for k, key in enumerate(unique_keys):
        origin = key * side
        members = pc.points[order[bounds[k] : bounds[k + 1]]] - origin
        blocks.append((tuple(int(v) for v in origin), VoxelBlock.from_points(members, side)))
    return blocks


def assemble_blocks(blocks, depth: int) -> PointCloud:
    """
    extract_blocks の逆。(原点, VoxelBlock) のリストから点群に戻す。
    """
    parts = [block.points(origin) for origin, block in blocks]
    if not parts:
        return PointCloud(np.zeros((0, 3), dtype=np.int64), depth)
    return PointCloud(np.concatenate(parts, axis=0), depth)


def rotation_matrix(degrees: float, axis: str) -> np.ndarray:
    """
    axis 周りに degrees 度回転する行列。
    """
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    if axis == 'x':
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 'y':
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == 'z':
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ParameterError("Argument axis must be 'x', 'y' or 'z'.")


def rotate_block_points(points, side: int, degrees: float, axis: str) -> np.ndarray:
    """
    ブロックの中心 (side/2, side/2, side/2) を軸にして回転し、
    格子に丸めてからブロックの外に出た点を捨てる。
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    center = side / 2
    rotated = (points - center) @ rotation_matrix(degrees, axis).T + center
    rounded = np.floor(rotated + 0.5).astype(np.int64)
    inside = np.all((rounded >= 0) & (rounded < side), axis=1)
    return _unique_points(rounded[inside])


def subsample(points, rate: float, rng: np.random.Generator) -> np.ndarray:
    """
    非復元の一様サンプリングで点を rate の割合だけ残す。
    """
    if not 0 < rate <= 1:
        raise ParameterError(f'Sampling rate must be in (0, 1]: {rate}')
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    n_points = len(points)
    if n_points == 0:
        return points.copy()
    n_keep = max(1, int(np.floor(rate * n_points + 0.5)))
    if n_keep >= n_points:
        return points.copy()
    kept = np.sort(rng.choice(n_points, size=n_keep, replace=False))
    return points[kept]


def augment(
    block_points,
    side: int,
    rotation_degrees=DEFAULT_ROTATION_DEGREES,
    sampling_rates=DEFAULT_SAMPLING_RATES,
    seed: int = 0,
    rotation: bool = True,
    sampling: bool = True,
) -> list[np.ndarray]:
    """
    学習用ブロックのデータ拡張。

    元のブロックと、各角度について x, y, z 軸周りに回転したブロックを作り、
    それぞれをそのまま + 各サンプリングレートで間引いたものにする。
    既定値 (45度, 0.7 と 0.4) ではブロック1つから 4 * 3 = 12 個になる。

    Parameters:
        block_points: ブロック内のローカル座標 (N, 3)
        side (int): ブロックの一辺
        rotation_degrees: 回転角 (度) のリスト
        sampling_rates: サンプリングレートのリスト。(0, 1] の範囲。
        seed (int): 乱数シード。同じシードなら同じ結果になる。
        rotation (bool): False のとき回転しない
        sampling (bool): False のとき間引かない
    """
    rates = list(sampling_rates) if sampling else []
    for rate in rates:
        if not 0 < rate <= 1:
            raise ParameterError(f'Sampling rate must be in (0, 1]: {rate}')
    rng = np.random.default_rng(seed)

    original = _unique_points(np.asarray(block_points, dtype=np.int64).reshape(-1, 3))
    bases = [original]
    if rotation:
        for degrees in rotation_degrees:
            bases += [rotate_block_points(original, side, degrees, axis) for axis in 'xyz']

    variants = []
    for base in bases:
        variants.append(base)
        variants += [subsample(base, rate, rng) for rate in rates]
    return variants


def _unique_points(points: np.ndarray) -> np.ndarray:
    """重複を除いてラスター順にする"""
    if len(points) == 0:
        return points.reshape(0, 3)
    return np.unique(points, axis=0)


def from_raw(rpc: _ply.RawPointCloud, depth: int) -> PointCloud:
    """
    座標がすでに 0 以上 2**depth 未満の整数ならそのまま使い、そうでなければボクセル化する。
    """
    points = rpc.points
    if (
        len(points) > 0
        and np.array_equal(points, np.floor(points))
        and points.min() >= 0
        and points.max() < 2**depth
    ):
        return PointCloud(points.astype(np.int64), depth)
    return voxelize(rpc, depth)


def block_points_from_raw(rpc: _ply.RawPointCloud) -> np.ndarray:
    """学習用ブロックの PLY (整数のローカル座標) を整数配列にする"""
    points = rpc.points
    if not np.array_equal(points, np.floor(points)) or (len(points) and points.min() < 0):
        raise ParameterError('Block coordinates must be non-negative integers.')
    return points.astype(np.int64)
