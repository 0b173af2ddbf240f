#! /usr/bin/env python3
# Copyright (c) oatsu
"""
符号化結果のコンテナ (ビットストリーム) を扱うモジュールです。
レイアウトは FORMAT.md を参照。多バイト整数はすべて little endian 。

    ヘッダー: "VXPC", u16 バージョン, u8 深さ n, u8 maxLv, u8 フラグ,
             u8 ハッシュ数, (u8 log2 ブロックサイズ, u64 ハッシュ) × ハッシュ数
    八分木:   u32 バイト数 + バイト列
    フラグ:   u32 ビット数 + 2ビットずつ MSB から詰めたもの
    モード:   u32 ビット数 + 2ビットずつ MSB から詰めたもの
    ペイロード: u32 個数 + (LEB128 のバイト数 + バイト列) × 個数
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

from bitarray import bitarray
from bitarray.util import ba2int, int2ba

from voxelpy.errors import (
    BadMagicError,
    CorruptStreamError,
    ParameterError,
    UnsupportedVersionError,
)

MAGIC = b'VXPC'
VERSION = 1
HEADER_FORMAT = '<4sHBBBB'
HASH_ENTRY_FORMAT = '<BQ'
FIELD_BITS = 2

FLAG_EXTENSION = 0x01
FLAG_SINGLE_MODEL = 0x02


def encode_uleb128(value: int) -> bytes:
    """符号なし LEB128"""
    if value < 0:
        raise ParameterError(f'LEB128 value must be >= 0: {value}')
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_uleb128(data: bytes, position: int = 0) -> tuple[int, int]:
    """(値, 次の位置) を返す"""
    value = 0
    shift = 0
    while True:
        if position >= len(data):
            raise CorruptStreamError('LEB128 length prefix is truncated.')
        byte = data[position]
        position += 1
        value |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            return value, position
        if shift > 63:
            raise CorruptStreamError('LEB128 length prefix is too long.')


def pack_fields(values) -> tuple[bytes, int]:
    """
    2ビットの値を MSB から詰める。戻り値は (バイト列, ビット数) 。
    """
    bits = bitarray(endian='big')
    for value in values:
        if not 0 <= value < (1 << FIELD_BITS):
            raise ParameterError(f'Value {value} does not fit into {FIELD_BITS} bits.')
        bits.extend(int2ba(int(value), length=FIELD_BITS, endian='big'))
    return bits.tobytes(), len(bits)


def unpack_fields(data: bytes, bit_count: int) -> list[int]:
    """pack_fields の逆"""
    if bit_count % FIELD_BITS:
        raise CorruptStreamError(f'Field segment has an odd bit length: {bit_count}')
    bits = bitarray(endian='big')
    bits.frombytes(bytes(data))
    return [ba2int(bits[i : i + FIELD_BITS]) for i in range(0, bit_count, FIELD_BITS)]


@dataclass
class BitAccounting:
    """
    ビット数の内訳。total_bits はストリームのバイト数の 8 倍と一致する。
    header_bits には固定ヘッダー、各セグメントの長さ、LEB128 、詰め物のビットを含める。
    """

    header_bits: int = 0
    octree_bits: int = 0
    flag_bits: int = 0
    mode_bits: int = 0
    payload_bits: int = 0

    @property
    def total_bits(self) -> int:
        return (
            self.header_bits + self.octree_bits + self.flag_bits + self.mode_bits
            + self.payload_bits
        )  # fmt: skip

    @property
    def side_info_bits(self) -> int:
        """ペイロード以外 (ヘッダー + 八分木 + フラグ + モード)"""
        return self.header_bits + self.octree_bits + self.flag_bits + self.mode_bits


@dataclass
class CodedBitstream:
    """
    ビットストリームの中身。
    model_hashes はブロックサイズ -> モデルのアーキテクチャハッシュ。
    """

    depth: int
    max_level: int
    extension: bool = False
    single_model: bool = False
    model_hashes: dict = field(default_factory=dict)
    octree: bytes = b''
    flags: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    payloads: list = field(default_factory=list)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return assemble(self)

    def accounting(self) -> BitAccounting:
        return measure(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def _header_bytes(stream: CodedBitstream) -> bytes:
    flags = (FLAG_EXTENSION if stream.extension else 0) | (
        FLAG_SINGLE_MODEL if stream.single_model else 0
    )
    parts = [
        struct.pack(
            HEADER_FORMAT,
            MAGIC,
            stream.version,
            stream.depth,
            stream.max_level,
            flags,
            len(stream.model_hashes),
        )
    ]
    for size, value in sorted(stream.model_hashes.items()):
        parts.append(struct.pack(HASH_ENTRY_FORMAT, size.bit_length() - 1, value))
    return b''.join(parts)


def assemble(stream: CodedBitstream) -> bytes:
    """
    CodedBitstream をバイト列にする。
    """
    if stream.octree and not stream.payloads:
        raise ParameterError('A non-empty point cloud needs at least one payload.')
    flag_data, flag_bits = pack_fields(stream.flags)
    mode_data, mode_bits = pack_fields(stream.modes)
    parts = [
        _header_bytes(stream),
        struct.pack('<I', len(stream.octree)),
        bytes(stream.octree),
        struct.pack('<I', flag_bits),
        flag_data,
        struct.pack('<I', mode_bits),
        mode_data,
        struct.pack('<I', len(stream.payloads)),
    ]
    for payload in stream.payloads:
        parts.append(encode_uleb128(len(payload)))
        parts.append(bytes(payload))
    return b''.join(parts)


def _padding_bits(bit_count: int) -> int:
    """バイト境界まで詰めたビット数"""
    return -bit_count % 8


def measure(stream: CodedBitstream) -> BitAccounting:
    """
    ビット数の内訳をレイアウトから数える。
    header_bits = 固定ヘッダー + ハッシュ + u32 の長さ 4つ + LEB128 + フラグとモードの詰め物
    """
    flag_bits = FIELD_BITS * len(stream.flags)
    mode_bits = FIELD_BITS * len(stream.modes)
    header_bytes = (
        struct.calcsize(HEADER_FORMAT)
        + struct.calcsize(HASH_ENTRY_FORMAT) * len(stream.model_hashes)
        + struct.calcsize('<I') * 4
        + sum(len(encode_uleb128(len(p))) for p in stream.payloads)
    )
    return BitAccounting(
        header_bits=8 * header_bytes + _padding_bits(flag_bits) + _padding_bits(mode_bits),
        octree_bits=8 * len(stream.octree),
        flag_bits=flag_bits,
        mode_bits=mode_bits,
        payload_bits=sum(8 * len(p) for p in stream.payloads),
    )


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.position = 0

    def read(self, n: int, what: str) -> bytes:
        end = self.position + n
        if end > len(self.data):
            raise CorruptStreamError(
                f'Bitstream is truncated in the {what} (need {end} bytes, got {len(self.data)}).'
            )
        chunk = self.data[self.position : end]
        self.position = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def parse(data: bytes) -> CodedBitstream:
    """
    バイト列を CodedBitstream に戻す。
    マジックが違う、バージョンが新しい、途中で切れている、のそれぞれで別の例外を投げる。
    """
    data = bytes(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError('Not a voxelpy bitstream (bad magic).')
    cursor = _Cursor(data)
    header = cursor.unpack(HEADER_FORMAT, 'header')
    _, version, depth, max_level, header_flags, hash_count = header
    if version > VERSION or version == 0:
        raise UnsupportedVersionError(
            f'Bitstream version {version} is not supported (this decoder reads {VERSION}).'
        )
    model_hashes = {}
    for _ in range(hash_count):
        log2_size, value = cursor.unpack(HASH_ENTRY_FORMAT, 'model hash list')
        model_hashes[1 << log2_size] = value

    (octree_length,) = cursor.unpack('<I', 'octree length')
    octree = cursor.read(octree_length, 'octree segment')
    (flag_bits,) = cursor.unpack('<I', 'flag length')
    flags = unpack_fields(cursor.read((flag_bits + 7) // 8, 'flag segment'), flag_bits)
    (mode_bits,) = cursor.unpack('<I', 'mode length')
    modes = unpack_fields(cursor.read((mode_bits + 7) // 8, 'mode segment'), mode_bits)
    (payload_count,) = cursor.unpack('<I', 'payload count')
    payloads = []
    for _ in range(payload_count):
        length, cursor.position = decode_uleb128(data, cursor.position)
        payloads.append(cursor.read(length, 'payload segment'))
    if cursor.position != len(data):
        raise CorruptStreamError(f'Bitstream has {len(data) - cursor.position} trailing bytes.')

    return CodedBitstream(
        depth=depth,
        max_level=max_level,
        extension=bool(header_flags & FLAG_EXTENSION),
        single_model=bool(header_flags & FLAG_SINGLE_MODEL),
        model_hashes=model_hashes,
        octree=octree,
        flags=flags,
        modes=modes,
        payloads=payloads,
        version=version,
    )


def load(path) -> CodedBitstream:
    """ファイルから読み取る"""
    return parse(Path(path).read_bytes())


@dataclass
class BpovReport:
    """bpov の内訳"""

    total_bits: int
    points: int
    accounting: BitAccounting

    @property
    def bpov(self) -> float:
        return self.total_bits / self.points

    @property
    def side_info_share(self) -> float:
        """ペイロード以外のビットの割合 (%)"""
        return 100.0 * self.accounting.side_info_bits / self.total_bits

    def __str__(self):
        a = self.accounting
        return '\n'.join(
            [
                f'points        : {self.points}',
                f'total bits    : {self.total_bits}',
                f'bpov          : {self.bpov:.6f}',
                f'  header      : {a.header_bits}',
                f'  octree      : {a.octree_bits}',
                f'  flags       : {a.flag_bits}',
                f'  modes       : {a.mode_bits}',
                f'  payloads    : {a.payload_bits}',
                f'side info [%] : {self.side_info_share:.3f}',
            ]
        )


def bpov_report(stream, points) -> BpovReport:
    """
    ビット数を占有ボクセル数で割る。
    stream はバイト列か CodedBitstream 、points は点の数か PointCloud 。
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = parse(stream)
    n_points = points if isinstance(points, int) else len(points)
    if n_points <= 0:
        raise ParameterError('bpov is undefined for an empty point cloud.')
    accounting = measure(stream)
    return BpovReport(accounting.total_bits, n_points, accounting)
