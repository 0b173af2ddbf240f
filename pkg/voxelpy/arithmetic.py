#! /usr/bin/env python3
# Copyright (c) oatsu
"""
2値の算術符号化器です。

32ビットの low / high レジスタと保留ビット (pending bits) で桁上がりを処理する。
確率は外から与える (モデルの出力)。符号化の前に 16 ビットに量子化するので、
エンコーダーとデコーダーで同じ値を使う限り完全に可逆。
出力は MSB から順にバイトに詰める。
"""

import numpy as np
from bitarray import bitarray

from voxelpy.errors import CorruptStreamError, StateError

PRECISION = 32
MAX_RANGE = (1 << PRECISION) - 1
HALF_RANGE = 1 << (PRECISION - 1)
QUARTER_RANGE = 1 << (PRECISION - 2)
THREE_QUARTER_RANGE = HALF_RANGE + QUARTER_RANGE

PROBABILITY_BITS = 16
PROBABILITY_SCALE = 1 << PROBABILITY_BITS
# デコーダーが末尾を超えて読んでよい 0 ビットの数
MAX_PADDING_BITS = PRECISION


def quantize_probability(p1) -> int:
    """
    1 が出る確率を 16 ビットの整数にする。結果は [1, 65535] に収まる。
    """
    q1 = int(np.floor(float(p1) * PROBABILITY_SCALE + 0.5))
    return min(max(q1, 1), PROBABILITY_SCALE - 1)


def quantize_probabilities(p1s) -> list[int]:
    """quantize_probability を配列にまとめて適用する"""
    q1s = np.floor(np.asarray(p1s, dtype=np.float64) * PROBABILITY_SCALE + 0.5)
    return np.clip(q1s, 1, PROBABILITY_SCALE - 1).astype(np.int64).reshape(-1).tolist()


def information_content(bits, p1s) -> float:
    """
    量子化した確率で bits を符号化したときの理想的なビット数。
    """
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    q1s = np.asarray(quantize_probabilities(p1s), dtype=np.float64)
    p = np.where(bits == 1, q1s, PROBABILITY_SCALE - q1s) / PROBABILITY_SCALE
    return float(-np.log2(p).sum())


class ArithmeticEncoder:
    """
    2値算術符号化のエンコーダー。

    使い方:
        encoder = ArithmeticEncoder()
        for bit, p1 in zip(bits, probabilities):
            encoder.encode(bit, p1)
        payload, bit_count = encoder.flush()
    """

    def __init__(self):
        self.low = 0
        self.high = MAX_RANGE
        self.pending_bits = 0
        self.output_bits = bitarray()
        self.symbol_count = 0
        self.finished = False

    def __len__(self):
        return self.symbol_count

    def encode(self, bit: int, p1: float):
        """1シンボル符号化する"""
        self.encode_quantized(bit, quantize_probability(p1))

    def encode_quantized(self, bit: int, q1: int):
        """量子化済みの確率で1シンボル符号化する"""
        if self.finished:
            raise StateError('Cannot encode after flush.')
        range_width = self.high - self.low + 1
        split = self.low + (range_width * (PROBABILITY_SCALE - q1) >> PROBABILITY_BITS)
        if bit:
            self.low = split
        else:
            self.high = split - 1
        self.symbol_count += 1
        self._renormalize()

    def encode_bits(self, bits, p1s):
        """配列をまとめて符号化する"""
        for bit, q1 in zip(np.asarray(bits).reshape(-1).tolist(), quantize_probabilities(p1s)):
            self.encode_quantized(bit, q1)

    def _renormalize(self):
        while True:
            if self.high < HALF_RANGE:
                self._emit_bit(0)
            elif self.low >= HALF_RANGE:
                self._emit_bit(1)
                self.low -= HALF_RANGE
                self.high -= HALF_RANGE
            elif self.low >= QUARTER_RANGE and self.high < THREE_QUARTER_RANGE:
                self.pending_bits += 1
                self.low -= QUARTER_RANGE
                self.high -= QUARTER_RANGE
            else:
                break
            self.low = (self.low << 1) & MAX_RANGE
            self.high = ((self.high << 1) | 1) & MAX_RANGE

    def _emit_bit(self, bit: int):
        self.output_bits.append(bit)
        if self.pending_bits > 0:
            self.output_bits.extend([1 - bit] * self.pending_bits)
            self.pending_bits = 0

    def flush(self) -> tuple[bytes, int]:
        """
        区間を確定させてペイロードを返す。
        戻り値は (ペイロード, ビット数) で、ビット数はバイト境界まで 0 で詰めた後の長さ。
        """
        if self.finished:
            raise StateError('ArithmeticEncoder has already been flushed.')
        self.finished = True
        self.pending_bits += 1
        self._emit_bit(0 if self.low < QUARTER_RANGE else 1)
        payload = self.output_bits.tobytes()
        return payload, 8 * len(payload)


class ArithmeticDecoder:
    """
    2値算術符号化のデコーダー。
    エンコード時と同じ確率の列を与えると同じビット列が返る。
    """

    def __init__(self, payload: bytes):
        self.bits = bitarray()
        self.bits.frombytes(bytes(payload))
        self.position = 0
        self.low = 0
        self.high = MAX_RANGE
        self.value = 0
        self.symbol_count = 0
        for _ in range(PRECISION):
            self.value = (self.value << 1) | self._next_bit()

    def _next_bit(self) -> int:
        position = self.position
        self.position += 1
        if position < len(self.bits):
            return self.bits[position]
        if position - len(self.bits) >= MAX_PADDING_BITS:
            raise CorruptStreamError(
                f'Arithmetic payload is exhausted after {self.symbol_count} symbols.'
            )
        return 0

    def decode(self, p1: float) -> int:
        """1シンボル復号する"""
        return self.decode_quantized(quantize_probability(p1))

    def decode_quantized(self, q1: int) -> int:
        range_width = self.high - self.low + 1
        split = self.low + (range_width * (PROBABILITY_SCALE - q1) >> PROBABILITY_BITS)
        if self.value >= split:
            bit = 1
            self.low = split
        else:
            bit = 0
            self.high = split - 1
        self.symbol_count += 1

        while True:
            if self.high < HALF_RANGE:
                pass
            elif self.low >= HALF_RANGE:
                self.low -= HALF_RANGE
                self.high -= HALF_RANGE
                self.value -= HALF_RANGE
            elif self.low >= QUARTER_RANGE and self.high < THREE_QUARTER_RANGE:
                self.low -= QUARTER_RANGE
                self.high -= QUARTER_RANGE
                self.value -= QUARTER_RANGE
            else:
                break
            self.low = (self.low << 1) & MAX_RANGE
            self.high = ((self.high << 1) | 1) & MAX_RANGE
            self.value = ((self.value << 1) | self._next_bit()) & MAX_RANGE
        return bit

    def decode_bits(self, p1s) -> np.ndarray:
        """配列をまとめて復号する"""
        return np.array(
            [self.decode_quantized(q1) for q1 in quantize_probabilities(p1s)], dtype=np.uint8
        )


def encode_bits(bits, p1s) -> tuple[bytes, int]:
    """ビット列を符号化してすぐ flush する"""
    encoder = ArithmeticEncoder()
    encoder.encode_bits(bits, p1s)
    return encoder.flush()


def decode_bits(payload: bytes, p1s) -> np.ndarray:
    """encode_bits の逆"""
    return ArithmeticDecoder(payload).decode_bits(p1s)
