#! /usr/bin/env python3
# Copyright (c) oatsu
"""
点群の上位八分木を扱うモジュールです。

深さ n の点群を n-6 レベルまで八分木で分割し、残った 64 ブロックを
ボクセル領域で符号化する。上位八分木は1ノード1バイトの占有パターンを
幅優先で並べたものをそのまま送る (圧縮しない)。

オクタント番号は o = 4*bx + 2*by + bz で、占有バイトの MSB がオクタント 0 。
"""

from collections import UserList

import numpy as np

from voxelpy.errors import CorruptStreamError, UnsupportedDepthError
from voxelpy.pointcloud import PointCloud, VoxelBlock, extract_blocks

BLOCK_SIZE = 64
BLOCK_LOG2 = 6
MIN_DEPTH = BLOCK_LOG2 + 1


def morton_encode(keys, bits: int) -> np.ndarray:
    """
    整数座標 (N, 3) をモートン符号にする。x が最上位ビット側。
    """
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    codes = np.zeros(len(keys), dtype=np.int64)
    for b in range(bits - 1, -1, -1):
        octant = (
            ((keys[:, 0] >> b) & 1) << 2 | ((keys[:, 1] >> b) & 1) << 1 | ((keys[:, 2] >> b) & 1)
        )
        codes = (codes << 3) | octant
    return codes


def morton_decode(codes, bits: int) -> np.ndarray:
    """morton_encode の逆"""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    keys = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(bits):
        octant = (codes >> (3 * b)) & 7
        keys[:, 0] |= ((octant >> 2) & 1) << b
        keys[:, 1] |= ((octant >> 1) & 1) << b
        keys[:, 2] |= (octant & 1) << b
    return keys


class HighOctree:
    """
    上位八分木。
    level_bytes[k] はレベル k+1 の全内部ノードの占有バイトを幅優先で並べたもの。
    """

    def __init__(self, depth: int, level_bytes=None):
        if depth < MIN_DEPTH:
            raise UnsupportedDepthError(
                f'Bit depth {depth} is too small. At least {MIN_DEPTH} is required.'
            )
        self.depth = depth
        self.level_bytes = [bytes(b) for b in (level_bytes or [])]

    def __eq__(self, other):
        if not isinstance(other, HighOctree):
            return NotImplemented
        return self.depth == other.depth and self.level_bytes == other.level_bytes

    def __repr__(self):
        return f'HighOctree(depth={self.depth}, levels={self.levels}, bytes={self.byte_count})'

    @property
    def levels(self) -> int:
        """八分木のレベル数 (n-6)"""
        return self.depth - BLOCK_LOG2

    @property
    def byte_count(self) -> int:
        return sum(len(b) for b in self.level_bytes)

    def leaf_codes(self) -> np.ndarray:
        """
        64 ブロックのモートン符号を幅優先 (=モートン順) で返す。
        """
        nodes = np.zeros(1, dtype=np.int64)
        for level_index, data in enumerate(self.level_bytes):
            if len(data) != len(nodes):
                raise CorruptStreamError(
                    f'Octree level {level_index + 1} has {len(data)} bytes, expected {len(nodes)}.'
                )
            nodes = _expand_level(nodes, data, level_index + 1)
        return nodes

    def block_origins(self) -> list[tuple[int, int, int]]:
        """
        占有されている 64 ブロックの原点をラスター順で返す。
        """
        if not self.level_bytes:
            return []
        keys = morton_decode(self.leaf_codes(), self.levels) * BLOCK_SIZE
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        return [tuple(int(v) for v in key) for key in keys[order]]

    def to_bytes(self) -> bytes:
        return serialize_high_octree(self)


class BlockGrid(UserList):
    """
    占有されている 64 ブロックのリスト。
    要素は (原点, VoxelBlock) で、原点のラスター順に並んでいる。
    """

    @property
    def origins(self) -> list[tuple[int, int, int]]:
        return [origin for origin, _ in self.data]

    def to_dict(self) -> dict:
        return dict(self.data)

    def point_count(self) -> int:
        return sum(block.count for _, block in self.data)

    def blocks(self) -> list[VoxelBlock]:
        return [block for _, block in self.data]


def build_high_octree(pc: PointCloud) -> tuple[HighOctree, BlockGrid]:
    """
    点群から上位八分木と 64 ブロックのリストを作る。
    """
    if pc.depth < MIN_DEPTH:
        raise UnsupportedDepthError(
            f'Bit depth {pc.depth} is too small. At least {MIN_DEPTH} is required.'
        )
    levels = pc.depth - BLOCK_LOG2
    grid = BlockGrid(extract_blocks(pc, BLOCK_SIZE))
    if len(grid) == 0:
        return HighOctree(pc.depth, []), grid

    keys = np.asarray(grid.origins, dtype=np.int64) // BLOCK_SIZE
    codes = np.unique(morton_encode(keys, levels))
    level_bytes = []
    for level in range(levels):
        children = np.unique(codes >> (3 * (levels - level - 1)))
        parents, inverse = np.unique(children >> 3, return_inverse=True)
        patterns = np.zeros(len(parents), dtype=np.int64)
        np.bitwise_or.at(patterns, inverse.reshape(-1), 0x80 >> (children & 7))
        level_bytes.append(patterns.astype(np.uint8).tobytes())
    return HighOctree(pc.depth, level_bytes), grid


def serialize_high_octree(tree: HighOctree) -> bytes:
    """
    各レベルのバイト列を幅優先のまま連結する。
    """
    return b''.join(tree.level_bytes)


def deserialize_high_octree(data: bytes, depth: int) -> HighOctree:
    """
    serialize_high_octree の逆。
    途中で切れている、余分なバイトがある、0 のバイトがあるときは CorruptStreamError 。
    """
    if depth < MIN_DEPTH:
        raise UnsupportedDepthError(
            f'Bit depth {depth} is too small. At least {MIN_DEPTH} is required.'
        )
    data = bytes(data)
    levels = depth - BLOCK_LOG2
    if len(data) == 0:
        # 点が1つもない点群
        return HighOctree(depth, [])
    position = 0
    nodes = np.zeros(1, dtype=np.int64)
    level_bytes = []
    for level in range(1, levels + 1):
        end = position + len(nodes)
        if end > len(data):
            raise CorruptStreamError(
                f'Octree stream is truncated at level {level}: '
                f'need {end} bytes, got {len(data)}.'
            )
        chunk = data[position:end]
        nodes = _expand_level(nodes, chunk, level)
        level_bytes.append(chunk)
        position = end
    if position != len(data):
        raise CorruptStreamError(f'Octree stream has {len(data) - position} trailing bytes.')
    return HighOctree(depth, level_bytes)


def _expand_level(nodes: np.ndarray, data: bytes, level: int) -> np.ndarray:
    """1レベル分の占有バイトから子ノードのモートン符号を作る"""
    patterns = np.frombuffer(data, dtype=np.uint8)
    if (patterns == 0).any():
        raise CorruptStreamError(f'Octree level {level} has an empty internal node.')
    # ビット o (MSB から) が立っている子だけを残す
    bits = np.unpackbits(patterns.reshape(-1, 1), axis=1).astype(bool)
    children = (nodes.reshape(-1, 1) << 3) | np.arange(8, dtype=np.int64)
    return children[bits]
