#! /usr/bin/env python3
# Copyright (c) oatsu
"""
点群全体の符号化と復号をするモジュールです。

    符号化: 上位八分木 -> 64 ブロックごとに分割と符号化 -> ビットストリーム
    復号  : ビットストリーム -> 八分木からブロックの原点 -> 64 ブロックごとに復号
"""

import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from voxelpy.bitstream import BpovReport, CodedBitstream, assemble, bpov_report, parse
from voxelpy.errors import CorruptStreamError, IncompatibleWeightsError, MissingModelError
from voxelpy.octree import build_high_octree, deserialize_high_octree, serialize_high_octree
from voxelpy.partition import CodedVoxelSet, Partitioner, PartitionTree
from voxelpy.pointcloud import PointCloud, assemble_blocks


@dataclass
class LeafRecord:
    """1ブロックとして符号化したノード1つ分の記録"""

    block_origin: tuple
    origin: tuple
    side: int
    mode: int
    model_size: int
    placement: str
    payload_bits: int
    points: int

    @property
    def bpov(self) -> float:
        return self.payload_bits / self.points if self.points else float('nan')


@dataclass
class EncodeResult:
    """
    encode_point_cloud の結果。
    """

    data: bytes
    bitstream: CodedBitstream
    trees: list
    point_count: int
    leaves: list = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.data)

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    @property
    def bpov(self) -> float:
        return self.total_bits / self.point_count

    def report(self) -> BpovReport:
        return bpov_report(self.bitstream, self.point_count)

    def selection_histogram(self) -> Counter:
        """(ブロックの一辺, モデルのサイズ) ごとに選ばれた回数"""
        return Counter((leaf.side, leaf.model_size) for leaf in self.leaves)

    def leaf_table(self) -> list[list]:
        """ノードごとの表。先頭行は見出し。"""
        rows = [['x', 'y', 'z', 'side', 'model_size', 'placement', 'payload_bits', 'points',
                 'bpov']]  # fmt: skip
        for leaf in self.leaves:
            rows.append([*leaf.origin, leaf.side, leaf.model_size, leaf.placement,
                         leaf.payload_bits, leaf.points, leaf.bpov])  # fmt: skip
        return rows

    def write(self, path):
        return self.bitstream.write(path)


def _leaf_records(tree: PartitionTree, partitioner: Partitioner, occupancy) -> list[LeafRecord]:
    records = []
    block_origin = tree.root.origin
    for node in tree.leaves():
        option = partitioner.options(node.side)[node.mode]
        x, y, z = (o - b for o, b in zip(node.origin, block_origin))
        points = int(occupancy[x : x + node.side, y : y + node.side, z : z + node.side].sum())
        records.append(
            LeafRecord(block_origin, node.origin, node.side, node.mode, option.model_size,
                       option.placement, node.payload_bits, points)  # fmt: skip
        )
    return records


def encode_point_cloud(pc: PointCloud, models: dict, max_level: int = 5, extension: bool = False,
                       single_model: bool = False, threads: int = 1) -> EncodeResult:  # fmt: skip
    """
    点群を符号化する。
    models はブロックサイズ -> VoxelDNN 。threads > 1 なら 64 ブロックを並列に符号化する
    (エンコーダーは全ボクセルを知っているので、どのブロックのコンテキストも最初から作れる)。
    """
    start = time.perf_counter()
    octree, grid = build_high_octree(pc)
    partitioner = Partitioner(models, max_level, extension, single_model)
    coded = CodedVoxelSet(grid.to_dict())

    def encode_block(item):
        origin, block = item
        tree = partitioner.partition(block, origin, coded)
        logging.info(
            'block %s: %d bits, %d leaves, %d points',
            origin, tree.total_bits, tree.leaf_count, block.count,
        )  # fmt: skip
        return tree

    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            trees = list(executor.map(encode_block, grid))
    else:
        trees = [encode_block(item) for item in grid]

    leaves = []
    for tree, (_, block) in zip(trees, grid):
        leaves += _leaf_records(tree, partitioner, block.occupancy)
    used_sizes = sorted({leaf.model_size for leaf in leaves})
    stream = CodedBitstream(
        depth=pc.depth,
        max_level=max_level,
        extension=extension,
        single_model=single_model,
        model_hashes={size: models[size].architecture_hash for size in used_sizes},
        octree=serialize_high_octree(octree),
        flags=[flag for tree in trees for flag in tree.flags()],
        modes=[mode for tree in trees for mode in tree.modes()],
        payloads=[payload for tree in trees for payload in tree.payloads()],
    )
    data = assemble(stream)
    seconds = time.perf_counter() - start
    logging.info('encoded %d points into %d bytes in %.2f s', len(pc), len(data), seconds)
    return EncodeResult(data, stream, trees, len(pc), leaves, seconds)


def check_models(stream: CodedBitstream, models: dict):
    """
    ヘッダーに書かれたハッシュと手元のモデルが合うか確かめる。
    """
    for size, expected in sorted(stream.model_hashes.items()):
        model = models.get(size)
        if model is None:
            raise MissingModelError(f'Bitstream needs the model for block size {size}.')
        actual = model.architecture_hash
        if actual != expected:
            raise IncompatibleWeightsError(
                f'Model for block size {size} has hash {actual:016x}, '
                f'but the bitstream expects {expected:016x}.'
            )


def decode_point_cloud(data, models: dict) -> PointCloud:
    """
    ビットストリームを点群に戻す。data はバイト列か CodedBitstream 。
    """
    start = time.perf_counter()
    stream = data if isinstance(data, CodedBitstream) else parse(data)
    check_models(stream, models)
    octree = deserialize_high_octree(stream.octree, stream.depth)
    partitioner = Partitioner(models, stream.max_level, stream.extension, stream.single_model)

    flags = iter(stream.flags)
    modes = iter(stream.modes)
    payloads = iter(stream.payloads)
    coded = CodedVoxelSet()
    blocks = []
    for origin in octree.block_origins():
        block = partitioner.decode(flags, modes, payloads, origin, coded)
        logging.debug('decoded block %s: %d points', origin, block.count)
        blocks.append((origin, block))
    for what, rest in (('flag', flags), ('mode', modes), ('payload', payloads)):
        if next(rest, None) is not None:
            raise CorruptStreamError(f'The {what} stream has unused entries.')

    pc = assemble_blocks(blocks, stream.depth)
    logging.info('decoded %d points in %.2f s', len(pc), time.perf_counter() - start)
    return pc
