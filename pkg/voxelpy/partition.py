#! /usr/bin/env python3
# Copyright (c) oatsu
"""
64 ブロックを再帰的に分割しながら符号化するモジュールです。

各ノードで「1ブロックとして符号化」と「8分割して子を符号化」の両方を試し、
ビット数の少ないほうを選ぶ (同じときは1ブロックのほう)。
フラグは 0: 空, 1: 1ブロックとして符号化, 2: さらに分割 。

コンテキスト拡張を有効にすると、1ブロックとして符号化するときに
拡張サイズの候補をすべて試して最も短いものを選び、その番号を 2 ビットで送る。
"""

from dataclasses import dataclass, field

import numpy as np

from voxelpy.arithmetic import ArithmeticDecoder, ArithmeticEncoder, quantize_probabilities
from voxelpy.errors import ConfigError, CorruptStreamError, MissingModelError, ParameterError
from voxelpy.octree import BLOCK_SIZE, morton_encode
from voxelpy.pointcloud import VoxelBlock
from voxelpy.voxeldnn import place_at_origin

FLAG_EMPTY = 0
FLAG_SINGLE = 1
FLAG_SPLIT = 2
FLAG_BITS = 2
MODE_BITS = 2

MAX_LEVEL = 5
MIN_NODE_SIZE = 4

# 符号化するブロックの一辺 -> コンテキストの一辺の候補
EXTENSION_TABLE = {
    64: (128, 64),
    32: (64, 32),
    16: (64, 32, 16),
    8: (64, 32, 16, 8),
}

PLACEMENT_CORNER = 'corner'
PLACEMENT_ORIGIN = 'origin'

# 64 ブロック内の各位置のモートン符号 (各軸 6 ビット)
_LOCAL_MORTON = morton_encode(
    np.stack(np.meshgrid(*(np.arange(BLOCK_SIZE),) * 3, indexing='ij'), axis=-1).reshape(-1, 3),
    6,
).reshape((BLOCK_SIZE,) * 3)


@dataclass(frozen=True)
class ModeOption:
    """
    1ブロック符号化のやり方。
    model_size: 使うモデルのブロックサイズ
    placement: corner ならブロックを最大側の角に置いて符号化済みのボクセルで埋める。
               origin ならブロックを原点側の角に置いて周りは 0 。
    """

    model_size: int
    placement: str


def mode_options(side: int, extension: bool = False, single_model: bool = False):
    """
    一辺 side のブロックで使えるモードのリスト。
    送るモード番号はこのリストの添字 (モデルが無いものを除く前の番号)。
    """
    if extension and single_model:
        raise ConfigError('Context extension and single-model mode cannot be combined.')
    if side == MIN_NODE_SIZE:
        size = BLOCK_SIZE if single_model else 8
        return [ModeOption(size, PLACEMENT_ORIGIN)]
    if single_model:
        if side >= BLOCK_SIZE:
            return [ModeOption(side, PLACEMENT_CORNER)]
        return [ModeOption(BLOCK_SIZE, PLACEMENT_ORIGIN)]
    if extension:
        if side not in EXTENSION_TABLE:
            raise ParameterError(f'No extension sizes for block side {side}.')
        return [ModeOption(size, PLACEMENT_CORNER) for size in EXTENSION_TABLE[side]]
    return [ModeOption(side, PLACEMENT_CORNER)]


class CodedVoxelSet:
    """
    符号化済み (復号済み) のボクセル。
    64 ブロックの原点 -> 64³ の占有配列 を持つ。

    ある64ブロック current の中のノード (モートン符号 limit から始まる) を符号化するとき、
    見えるのは次のボクセルだけ。
        - current よりラスター順で前の 64 ブロックのすべて
        - current の中でモートン符号が limit より小さい位置
    エンコーダーは全ブロックの正解を入れておき、デコーダーは復号した値を入れていく。
    どちらも同じ規則で読み出すので、同じコンテキストになる。
    """

    def __init__(self, blocks=None):
        self.blocks = {}
        for origin, block in dict(blocks or {}).items():
            self.add_block(origin, block)

    def __contains__(self, origin):
        return tuple(origin) in self.blocks

    def __len__(self):
        return len(self.blocks)

    def add_block(self, origin, block):
        occupancy = np.asarray(getattr(block, 'occupancy', block), dtype=np.uint8)
        if occupancy.shape != (BLOCK_SIZE,) * 3:
            raise ParameterError(f'CodedVoxelSet stores 64-blocks only: {occupancy.shape}')
        self.blocks[tuple(int(v) for v in origin)] = occupancy

    def gather(self, lo, size: int, current_origin, limit: int) -> np.ndarray:
        """
        絶対座標 lo から一辺 size の立方体を切り出す。見えない位置と範囲外は 0 。
        """
        lo = np.asarray(lo, dtype=np.int64)
        current_origin = tuple(int(v) for v in current_origin)
        out = np.zeros((size, size, size), dtype=np.uint8)
        hi = lo + size
        first = (np.maximum(lo, 0) // BLOCK_SIZE) * BLOCK_SIZE
        for bx in range(int(first[0]), int(hi[0]), BLOCK_SIZE):
            for by in range(int(first[1]), int(hi[1]), BLOCK_SIZE):
                for bz in range(int(first[2]), int(hi[2]), BLOCK_SIZE):
                    origin = (bx, by, bz)
                    if origin not in self.blocks or origin > current_origin:
                        continue
                    source = self.blocks[origin]
                    if origin == current_origin:
                        source = np.where(_LOCAL_MORTON < limit, source, 0)
                    block_lo = np.array(origin)
                    a = np.maximum(lo, block_lo)
                    b = np.minimum(hi, block_lo + BLOCK_SIZE)
                    if np.any(a >= b):
                        continue
                    out[
                        a[0] - lo[0] : b[0] - lo[0],
                        a[1] - lo[1] : b[1] - lo[1],
                        a[2] - lo[2] : b[2] - lo[2],
                    ] = source[
                        a[0] - bx : b[0] - bx,
                        a[1] - by : b[1] - by,
                        a[2] - bz : b[2] - bz,
                    ]
        return out


def node_morton(local_origin) -> int:
    """64 ブロック内のノードの原点のモートン符号"""
    x, y, z = local_origin
    return int(_LOCAL_MORTON[x, y, z])


def build_context(side: int, block, origin, block64_origin, coded: CodedVoxelSet,
                  option: ModeOption, limit: int) -> np.ndarray:  # fmt: skip
    """
    option に従ってモデルに入れるコンテキストを作る。
    block に占有配列を与えるとその位置に書き込む (エンコーダー用)。
    """
    size = option.model_size
    if option.placement == PLACEMENT_ORIGIN:
        if block is None:
            return np.zeros((size,) * 3, dtype=np.uint8)
        return place_at_origin(block, size)
    # ブロックはコンテキストの最大側の角に置く
    offset = size - side
    lo = tuple(v - offset for v in origin)
    context = coded.gather(lo, size, block64_origin, limit)
    if block is not None:
        context[offset:, offset:, offset:] = block
    return context


def _readout(probs: np.ndarray, option: ModeOption, side: int) -> np.ndarray:
    """コンテキスト全体の確率からブロックの位置の p1 をラスター順に取り出す"""
    offset = 0 if option.placement == PLACEMENT_ORIGIN else option.model_size - side
    return probs[1, offset : offset + side, offset : offset + side, offset : offset + side]


def encode_single_block(block, origin, coded: CodedVoxelSet, model, option: ModeOption,
                        block64_origin=None) -> tuple[bytes, int]:  # fmt: skip
    """
    ブロックを1つのペイロードとして符号化する。
    戻り値は (ペイロード, ビット数) 。
    """
    occupancy = np.asarray(getattr(block, 'occupancy', block), dtype=np.uint8)
    side = occupancy.shape[0]
    if model is None or model.block_size != option.model_size:
        raise MissingModelError(f'Model for block size {option.model_size} is not loaded.')
    block64_origin, limit = _block64_position(origin, block64_origin)
    context = build_context(side, occupancy, origin, block64_origin, coded, option, limit)
    probs = model.predict(context)
    p1 = _readout(probs, option, side)
    encoder = ArithmeticEncoder()
    for bit, q1 in zip(occupancy.reshape(-1).tolist(), quantize_probabilities(p1)):
        encoder.encode_quantized(bit, q1)
    return encoder.flush()


def decode_single_block(payload: bytes, side: int, origin, coded: CodedVoxelSet, model,
                        option: ModeOption, block64_origin=None) -> VoxelBlock:  # fmt: skip
    """
    encode_single_block の逆。
    1ボクセル復号するたびにコンテキストに戻して次の確率を計算する。
    """
    if model is None or model.block_size != option.model_size:
        raise MissingModelError(f'Model for block size {option.model_size} is not loaded.')
    block64_origin, limit = _block64_position(origin, block64_origin)
    context = build_context(side, None, origin, block64_origin, coded, option, limit)
    offset = 0 if option.placement == PLACEMENT_ORIGIN else option.model_size - side
    predictor = model.causal_predictor(context)
    decoder = ArithmeticDecoder(payload)
    block = VoxelBlock(side)
    for x in range(side):
        for y in range(side):
            for z in range(side):
                p1 = predictor.p1(x + offset, y + offset, z + offset)
                bit = decoder.decode(p1)
                if bit:
                    block.occupancy[x, y, z] = 1
                    predictor.set_voxel(x + offset, y + offset, z + offset)
    return block


def _block64_position(origin, block64_origin):
    """ノードが属する 64 ブロックの原点と、ノードのモートン符号"""
    origin = tuple(int(v) for v in origin)
    if block64_origin is None:
        block64_origin = tuple((v // BLOCK_SIZE) * BLOCK_SIZE for v in origin)
    local = tuple(o - b for o, b in zip(origin, block64_origin))
    return tuple(block64_origin), node_morton(local)


@dataclass
class PartitionNode:
    """
    分割木のノード。
    flag が 1 のときは mode / payload / payload_bits を持ち、2 のときは children (8個) を持つ。
    """

    level: int
    origin: tuple
    side: int
    flag: int = FLAG_EMPTY
    mode: int | None = None
    payload: bytes | None = None
    payload_bits: int = 0
    children: list = field(default_factory=list)

    def walk(self):
        """深さ優先の前順で全ノードを返す"""
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self):
        """1ブロックとして符号化したノードを順に返す"""
        return [node for node in self.walk() if node.flag == FLAG_SINGLE]


class PartitionTree:
    """
    1つの 64 ブロックの分割結果。
    """

    def __init__(self, root: PartitionNode, extension: bool = False):
        self.root = root
        self.extension = extension

    def __repr__(self):
        return (
            f'PartitionTree(origin={self.root.origin}, flags={self.flag_count}, '
            f'leaves={self.leaf_count}, bits={self.total_bits})'
        )

    def flags(self) -> list[int]:
        return [node.flag for node in self.root.walk()]

    def modes(self) -> list[int]:
        if not self.extension:
            return []
        return [node.mode for node in self.root.leaves()]

    def payloads(self) -> list[bytes]:
        return [node.payload for node in self.root.leaves()]

    def leaves(self) -> list[PartitionNode]:
        return self.root.leaves()

    @property
    def flag_count(self) -> int:
        return sum(1 for _ in self.root.walk())

    @property
    def leaf_count(self) -> int:
        return len(self.root.leaves())

    @property
    def payload_bits(self) -> int:
        return sum(node.payload_bits for node in self.root.leaves())

    @property
    def total_bits(self) -> int:
        """フラグ 2 ビット + モード 2 ビット (拡張時) + ペイロード"""
        mode_bits = MODE_BITS * self.leaf_count if self.extension else 0
        return FLAG_BITS * self.flag_count + mode_bits + self.payload_bits


class Partitioner:
    """
    1つの 64 ブロックについて分割と符号化を決める。

    models はブロックサイズ -> モデル (predict と causal_predictor を持つもの) 。
    """

    def __init__(self, models: dict, max_level: int = MAX_LEVEL, extension: bool = False,
                 single_model: bool = False):  # fmt: skip
        if not 1 <= max_level <= MAX_LEVEL:
            raise ParameterError(f'max_level must be in 1..{MAX_LEVEL}: {max_level}')
        if extension and single_model:
            raise ConfigError('Context extension and single-model mode cannot be combined.')
        self.models = models
        self.max_level = max_level
        self.extension = extension
        self.single_model = single_model

    def side_at(self, level: int) -> int:
        return BLOCK_SIZE >> (level - 1)

    def options(self, side: int) -> list[ModeOption]:
        return mode_options(side, self.extension, self.single_model)

    def leaf_cost(self, payload_bits: int) -> int:
        return FLAG_BITS + (MODE_BITS if self.extension else 0) + payload_bits

    def encode_single(self, occupancy, origin, block64_origin, coded):
        """
        使えるモードをすべて試して最も短いものを返す。
        戻り値は (モード番号, ペイロード, ビット数) 、使えるモデルが無ければ None 。
        """
        best = None
        side = occupancy.shape[0]
        for index, option in enumerate(self.options(side)):
            model = self.models.get(option.model_size)
            if model is None:
                continue
            payload, bits = encode_single_block(
                occupancy, origin, coded, model, option, block64_origin
            )
            if best is None or bits < best[2]:
                best = (index, payload, bits)
        return best

    def partition(self, block64, origin, coded: CodedVoxelSet) -> PartitionTree:
        """
        64 ブロックを分割して符号化する。
        """
        occupancy = np.asarray(getattr(block64, 'occupancy', block64), dtype=np.uint8)
        origin = tuple(int(v) for v in origin)
        root, _ = self._evaluate(occupancy, origin, origin, 1, coded)
        return PartitionTree(root, self.extension)

    def _evaluate(self, occupancy, origin, block64_origin, level, coded):
        """(ノード, そのノードのビット数) を返す"""
        side = occupancy.shape[0]
        if not occupancy.any():
            return PartitionNode(level, origin, side, FLAG_EMPTY), FLAG_BITS

        single = self.encode_single(occupancy, origin, block64_origin, coded)
        can_split = level < self.max_level and side > MIN_NODE_SIZE
        if single is None and not can_split:
            raise MissingModelError(
                f'No model is available to code a block of side {side} '
                f'({", ".join(str(o.model_size) for o in self.options(side))} required).'
            )
        if single is not None:
            mode, payload, bits = single
            node1 = PartitionNode(level, origin, side, FLAG_SINGLE, mode, payload, bits)
            cost1 = self.leaf_cost(bits)
        if not can_split:
            return node1, cost1

        half = side // 2
        children = []
        cost2 = FLAG_BITS
        for octant in range(8):
            ox, oy, oz = (octant >> 2) & 1, (octant >> 1) & 1, octant & 1
            sub = occupancy[
                ox * half : (ox + 1) * half,
                oy * half : (oy + 1) * half,
                oz * half : (oz + 1) * half,
            ]
            child_origin = (origin[0] + ox * half, origin[1] + oy * half, origin[2] + oz * half)
            child, child_cost = self._evaluate(sub, child_origin, block64_origin, level + 1, coded)
            children.append(child)
            cost2 += child_cost

        if single is not None and cost2 >= cost1:
            return node1, cost1
        return PartitionNode(level, origin, side, FLAG_SPLIT, children=children), cost2

    def decode(self, flags, modes, payloads, origin, coded: CodedVoxelSet) -> VoxelBlock:
        """
        partition の逆。flags / modes / payloads は読み進めるイテレーター。
        復号中の 64 ブロックは coded に登録して、後のノードのコンテキストに使う。
        """
        origin = tuple(int(v) for v in origin)
        current = np.zeros((BLOCK_SIZE,) * 3, dtype=np.uint8)
        coded.add_block(origin, current)
        current = coded.blocks[origin]
        flag = _next_value(flags, 'flag')
        if flag == FLAG_EMPTY:
            raise CorruptStreamError(f'64-block at {origin} is signaled as empty.')
        self._decode_node(flag, flags, modes, payloads, current, origin, (0, 0, 0), 1, coded)
        return VoxelBlock(BLOCK_SIZE, current.copy())

    def _decode_node(self, flag, flags, modes, payloads, current, block64_origin, local, level,
                     coded):  # fmt: skip
        side = self.side_at(level)
        if flag == FLAG_EMPTY:
            return
        if flag == FLAG_SINGLE:
            options = self.options(side)
            mode = _next_value(modes, 'mode') if self.extension else 0
            if mode >= len(options):
                raise CorruptStreamError(f'Mode {mode} is out of range for block side {side}.')
            option = options[mode]
            model = self.models.get(option.model_size)
            if model is None:
                raise MissingModelError(f'Model for block size {option.model_size} is not loaded.')
            origin = tuple(b + v for b, v in zip(block64_origin, local))
            payload = _next_value(payloads, 'payload')
            block = decode_single_block(
                payload, side, origin, coded, model, option, block64_origin
            )
            x, y, z = local
            current[x : x + side, y : y + side, z : z + side] = block.occupancy
            return
        if flag != FLAG_SPLIT:
            raise CorruptStreamError(f'Invalid partition flag: {flag}')
        if level >= self.max_level or side <= MIN_NODE_SIZE:
            raise CorruptStreamError(f'Split flag at the deepest level {level}.')
        half = side // 2
        for octant in range(8):
            child_local = (
                local[0] + ((octant >> 2) & 1) * half,
                local[1] + ((octant >> 1) & 1) * half,
                local[2] + (octant & 1) * half,
            )
            child_flag = _next_value(flags, 'flag')
            self._decode_node(
                child_flag, flags, modes, payloads, current, block64_origin, child_local,
                level + 1, coded,
            )  # fmt: skip


def _next_value(iterator, what: str):
    try:
        return next(iterator)
    except StopIteration as e:
        raise CorruptStreamError(f'The {what} stream is exhausted.') from e


def partition(block64, origin, coded: CodedVoxelSet, models: dict, max_level: int = MAX_LEVEL,
              extension: bool = False, single_model: bool = False) -> PartitionTree:  # fmt: skip
    """Partitioner.partition を関数として呼ぶ"""
    partitioner = Partitioner(models, max_level, extension, single_model)
    return partitioner.partition(block64, origin, coded)


def decode_partition(flags, modes, payloads, origin, coded: CodedVoxelSet, models: dict,
                     max_level: int = MAX_LEVEL, extension: bool = False,
                     single_model: bool = False) -> VoxelBlock:  # fmt: skip
    """Partitioner.decode を関数として呼ぶ"""
    partitioner = Partitioner(models, max_level, extension, single_model)
    return partitioner.decode(iter(flags), iter(modes), iter(payloads), origin, coded)
