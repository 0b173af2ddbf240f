#! /usr/bin/env python3
# Copyright (c) oatsu
"""
VoxelDNN 用の小さなテンソル計算モジュールです。

テンソルは numpy 配列で、形は (バッチ, チャンネル, dx, dy, dz) 。
エンコーダーとデコーダーで確率をビット単位で一致させるため、
マスク付き3次元畳み込みは次の決まった順で計算する。
    - 64ビットで累積する
    - 入力チャンネルごとに、カーネル内のマスクされていないタップをラスター順に足す
    - 最後にバイアスを足して 32ビットに1回だけ丸める
"""

import struct
from collections import UserDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from voxelpy.errors import (
    CorruptStreamError,
    IncompatibleWeightsError,
    ParameterError,
    ShapeError,
    StateError,
)

# softmax の出力を [EPSILON, 1-EPSILON] に収める
EPSILON = 2.0**-16

# masked_conv3d_region で一度に積を作る要素数の上限 (float64)
ACCUMULATION_CHUNK = 1 << 22

WEIGHTS_MAGIC = b'VXDW'
WEIGHTS_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FNV_MASK = (1 << 64) - 1


def build_mask(kernel_size: int, kind: str) -> np.ndarray:
    """
    3次元のマスクを作る。

    type A: ラスター順で中心より前だけ 1
    type B: type A に加えて中心も 1
    """
    if kind not in ('A', 'B'):
        raise ParameterError("Mask kind must be 'A' or 'B'.")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f'Kernel size must be a positive odd number: {kernel_size}')
    n_taps = kernel_size**3
    center = n_taps // 2
    flat = np.zeros(n_taps, dtype=np.uint8)
    flat[:center] = 1
    if kind == 'B':
        flat[center] = 1
    return flat.reshape((kernel_size,) * 3)


@dataclass(frozen=True)
class MaskSpec:
    """マスクの種類 (A/B) とカーネルサイズ"""

    kind: str
    kernel_size: int

    @property
    def mask(self) -> np.ndarray:
        return build_mask(self.kernel_size, self.kind)

    @property
    def taps(self) -> list[tuple[int, int, int]]:
        """マスクされていないタップの位置 (ラスター順)"""
        return [tuple(int(v) for v in t) for t in np.argwhere(self.mask)]

    @property
    def padding(self) -> int:
        return self.kernel_size // 2


def pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    """空間方向に 0 を詰める (same パディング)"""
    if padding == 0:
        return x
    width = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    return np.pad(x, width)


def masked_conv3d_region(xpad, weight, bias, taps, lo, hi, dtype=np.float32) -> np.ndarray:
    """
    パディング済みの入力 xpad から、出力のうち [lo, hi) の直方体だけを計算する。
    全体を計算したときと同じ順で足すので、部分的に計算し直しても値は一致する。

    (入力チャンネル, タップ) の組をまとめて積を作り、np.add.accumulate で
    先頭から1つずつ足す。まとめる数を変えても足す順は変わらない。
    """
    batch = xpad.shape[0]
    out_channels, in_channels, k = weight.shape[0], weight.shape[1], weight.shape[2]
    size = tuple(h - l for l, h in zip(lo, hi))
    n = int(np.prod(size))
    acc = np.zeros((batch, out_channels, n), dtype=np.float64)
    taps = np.asarray(taps, dtype=np.intp).reshape(-1, 3)
    if n > 0 and len(taps) > 0:
        windows = sliding_window_view(xpad, (k, k, k), axis=(2, 3, 4))[
            :, :, lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]
        ]
        # チャンネルが外側、タップが内側の順
        channels = np.repeat(np.arange(in_channels), len(taps))
        tx, ty, tz = (np.tile(taps[:, i], in_channels) for i in range(3))
        weight64 = weight.astype(np.float64)[:, channels, tx, ty, tz].T
        step = max(1, ACCUMULATION_CHUNK // acc.size)
        for start in range(0, len(channels), step):
            part = slice(start, start + step)
            # (組, バッチ, dx, dy, dz)
            patches = windows[:, channels[part], :, :, :, tx[part], ty[part], tz[part]]
            stack = np.empty((patches.shape[0] + 1, batch, out_channels, n), dtype=np.float64)
            stack[0] = acc
            np.multiply(
                weight64[part].reshape(-1, 1, out_channels, 1),
                patches.reshape(-1, batch, 1, n),
                out=stack[1:],
            )
            acc = np.add.accumulate(stack, axis=0)[-1]
    acc += bias.astype(np.float64).reshape(1, -1, 1)
    return acc.reshape(batch, out_channels, *size).astype(dtype)


def _check_conv_shapes(x, weight, bias, mask: MaskSpec):
    if x.ndim != 5:
        raise ShapeError(f'Input must have 5 dims (batch, channel, dx, dy, dz): {x.shape}')
    k = mask.kernel_size
    if weight.ndim != 5 or weight.shape[2:] != (k, k, k):
        raise ShapeError(f'Weight shape {weight.shape} does not match kernel size {k}.')
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f'Input has {x.shape[1]} channels but weight expects {weight.shape[1]}.'
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f'Bias shape {bias.shape} does not match {weight.shape[0]} filters.')


def masked_conv3d_forward(x, weight, bias, mask: MaskSpec, dtype=np.float32) -> np.ndarray:
    """
    マスク付き3次元畳み込み (stride 1, same パディング)。
    """
    x = np.asarray(x)
    _check_conv_shapes(x, weight, bias, mask)
    xpad = pad_input(x.astype(dtype, copy=False), mask.padding)
    spatial = x.shape[2:]
    return masked_conv3d_region(xpad, weight, bias, mask.taps, (0, 0, 0), spatial, dtype)


def masked_conv3d_backward(grad_out, x, weight, mask: MaskSpec, dtype=np.float32):
    """
    masked_conv3d_forward の勾配。
    戻り値は (入力の勾配, 重みの勾配, バイアスの勾配) 。マスクされた位置の重みの勾配は 0 。
    """
    if x is None:
        raise StateError('Forward cache is missing. Call forward before backward.')
    grad_out64 = np.asarray(grad_out, dtype=np.float64)
    p = mask.padding
    xpad = pad_input(np.asarray(x, dtype=np.float64), p)
    weight64 = weight.astype(np.float64)
    grad_xpad = np.zeros_like(xpad)
    grad_weight = np.zeros(weight.shape, dtype=np.float64)
    dx, dy, dz = grad_out64.shape[2:]
    for tx, ty, tz in mask.taps:
        window = (slice(None), slice(None), slice(tx, tx + dx), slice(ty, ty + dy),
                  slice(tz, tz + dz))  # fmt: skip
        grad_weight[:, :, tx, ty, tz] = np.tensordot(
            grad_out64, xpad[window], axes=([0, 2, 3, 4], [0, 2, 3, 4])
        )
        # (C, B, dx, dy, dz) -> (B, C, dx, dy, dz)
        grad_xpad[window] += np.tensordot(
            weight64[:, :, tx, ty, tz], grad_out64, axes=([0], [1])
        ).transpose(1, 0, 2, 3, 4)
    grad_bias = grad_out64.sum(axis=(0, 2, 3, 4))
    if p > 0:
        grad_x = grad_xpad[:, :, p:-p, p:-p, p:-p]
    else:
        grad_x = grad_xpad
    return grad_x.astype(dtype), grad_weight.astype(dtype), grad_bias.astype(dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad, 0).astype(grad.dtype, copy=False)


def add_residual(x: np.ndarray, branch: np.ndarray) -> np.ndarray:
    """残差接続"""
    if x.shape != branch.shape:
        raise ShapeError(f'Residual shapes differ: {x.shape} and {branch.shape}')
    return x + branch


def softmax2(logits: np.ndarray) -> np.ndarray:
    """
    2チャンネルの softmax 。チャンネル軸は 1 。
    出力は float64 で、p0 + p1 はちょうど 1 になる。
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim < 2 or logits.shape[1] != 2:
        raise ShapeError(f'softmax2 expects 2 channels on axis 1: {logits.shape}')
    with np.errstate(over='ignore'):
        p1 = 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))
    p1 = np.clip(p1, EPSILON, 1.0 - EPSILON)
    return np.stack([1.0 - p1, p1], axis=1)


def _target_array(target) -> np.ndarray:
    """VoxelBlock やその配列を (バッチ, dx, dy, dz) の 0/1 配列にする"""
    if hasattr(target, 'occupancy'):
        target = target.occupancy[np.newaxis]
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[np.newaxis]
    return target.astype(np.uint8, copy=False)


def cross_entropy_loss(probs: np.ndarray, target) -> float:
    """
    ボクセルごとの -log p(v) の平均。単位はビット。
    """
    target = _target_array(target)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ShapeError(f'Probability shape {probs.shape} does not match target {target.shape}')
    chosen = np.where(target == 1, probs[:, 1], probs[:, 0])
    chosen = np.clip(chosen, EPSILON, 1.0)
    return float(-np.log(chosen).mean() / np.log(2))


def cross_entropy_backward(probs: np.ndarray, target) -> np.ndarray:
    """
    softmax2 と cross_entropy_loss をまとめた、ロジットに対する勾配。
    """
    target = _target_array(target)
    grad1 = (probs[:, 1] - target) / (target.size * np.log(2))
    return np.stack([-grad1, grad1], axis=1)


class MaskedConv3d:
    """
    マスク付き3次元畳み込み層。forward で入力を覚えておき、backward で使う。
    """

    def __init__(self, name, in_channels, out_channels, kernel_size, kind, dtype=np.float32):
        self.name = name
        self.spec = MaskSpec(kind, kernel_size)
        self.dtype = dtype
        self.weight = np.zeros((out_channels, in_channels) + (kernel_size,) * 3, dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def __repr__(self):
        out_channels, in_channels = self.weight.shape[:2]
        return (
            f'MaskedConv3d({self.name}, {in_channels}->{out_channels}, '
            f'k={self.spec.kernel_size}, type {self.spec.kind})'
        )

    @property
    def parameter_names(self) -> tuple[str, str]:
        return f'{self.name}.weight', f'{self.name}.bias'

    def initialize(self, rng: np.random.Generator):
        """
        マスクされていないタップだけで fan_in / fan_out を数えて一様分布で初期化する。
        バイアスは 0 。
        """
        out_channels, in_channels = self.weight.shape[:2]
        mask = self.spec.mask
        n_taps = int(mask.sum())
        limit = np.sqrt(6.0 / (in_channels * n_taps + out_channels * n_taps))
        weight = rng.uniform(-limit, limit, size=self.weight.shape) * mask
        self.weight = weight.astype(self.dtype)
        self.bias = np.zeros_like(self.bias)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return masked_conv3d_forward(x, self.weight, self.bias, self.spec, self.dtype)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, self.grad_weight, self.grad_bias = masked_conv3d_backward(
            grad_out, self._cache, self.weight, self.spec, self.dtype
        )
        return grad_x

    def clear_cache(self):
        self._cache = None


class Adam:
    """
    Adam 最適化。モーメントは名前ごとに 0 から始まる。
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> dict:
        """
        params を grads で1ステップ更新した新しい辞書を返す。
        """
        self.t += 1
        updated = {}
        for name, value in params.items():
            grad = np.asarray(grads[name], dtype=np.float64)
            if grad.shape != value.shape:
                raise ShapeError(f'Gradient shape of {name} is {grad.shape}, not {value.shape}')
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * grad
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * grad * grad
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            step = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            updated[name] = (value.astype(np.float64) - step).astype(value.dtype)
        return updated


def adam_step(params: dict, grads: dict, optimizer: Adam | None = None, **kwargs) -> dict:
    """Adam を1ステップだけ進める"""
    optimizer = optimizer or Adam(**kwargs)
    return optimizer.step(params, grads)


def architecture_hash(layout) -> int:
    """
    (層の名前, 形) のリストから 64ビット FNV-1a ハッシュを作る。
    名前は UTF-8 + 0x00 、形は rank (u8) と各次元 (u32 little endian) 。
    """
    h = FNV_OFFSET
    for name, shape in layout:
        data = name.encode('utf-8') + b'\x00' + struct.pack(f'<B{len(shape)}I', len(shape), *shape)
        for byte in data:
            h ^= byte
            h = (h * FNV_PRIME) & FNV_MASK
    return h


class ModelWeights(UserDict):
    """
    層の名前 -> float32 配列 の辞書。順番は層の順。
    block_size はこの重みが対象にするブロックの一辺。
    """

    def __init__(self, block_size: int, layers=None):
        super().__init__()
        if block_size < 1 or block_size & (block_size - 1):
            raise ParameterError(f'Block size must be a power of two: {block_size}')
        self.block_size = block_size
        for name, value in dict(layers or {}).items():
            self.data[name] = np.asarray(value, dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        if self.block_size != other.block_size or list(self.keys()) != list(other.keys()):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(value.shape)) for name, value in self.items()]

    @property
    def architecture_hash(self) -> int:
        return architecture_hash(self.layout)

    @property
    def filters(self) -> int:
        """最初の層の出力チャンネル数"""
        first = next(iter(self.values()))
        return int(first.shape[0])

    def write(self, path) -> Path:
        return save_weights(self, path)


def save_weights(weights: ModelWeights, path) -> Path:
    """
    重みファイルを書き出す。
    """
    parts = [
        struct.pack(
            '<4sHBH',
            WEIGHTS_MAGIC,
            WEIGHTS_VERSION,
            weights.block_size.bit_length() - 1,
            len(weights),
        )
    ]
    for name, value in weights.items():
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack(f'<B{value.ndim}I', value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype='<f4').tobytes())
    path = Path(path)
    path.write_bytes(b''.join(parts))
    return path


class _Reader:
    """バイト列を前から読む"""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.position = 0
        self.what = what

    def read(self, n: int) -> bytes:
        end = self.position + n
        if end > len(self.data):
            raise CorruptStreamError(f'{self.what} is truncated at byte {self.position}.')
        chunk = self.data[self.position : end]
        self.position = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_weights(path, expected_layout=None) -> ModelWeights:
    """
    重みファイルを読み取る。
    expected_layout を与えると層の名前と形を確認し、違えば ShapeError 。
    """
    reader = _Reader(Path(path).read_bytes(), 'Weight file')
    if len(reader.data) < 4 or reader.data[:4] != WEIGHTS_MAGIC:
        raise IncompatibleWeightsError(f'Not a weight file (bad magic): {path}')
    _, version, log2_size, n_layers = reader.unpack('<4sHBH')
    if version != WEIGHTS_VERSION:
        raise IncompatibleWeightsError(f'Unsupported weight file version: {version}')

    weights = ModelWeights(1 << log2_size)
    for _ in range(n_layers):
        (name_length,) = reader.unpack('<H')
        try:
            name = reader.read(name_length).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CorruptStreamError(f'Layer name is not UTF-8: {e}') from e
        (rank,) = reader.unpack('<B')
        shape = reader.unpack(f'<{rank}I')
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.read(4 * count), dtype='<f4').reshape(shape)
        weights.data[name] = values.astype(np.float32)
    if reader.position != len(reader.data):
        extra = len(reader.data) - reader.position
        raise CorruptStreamError(f'Weight file has {extra} extra bytes.')

    if expected_layout is not None and weights.layout != list(expected_layout):
        raise ShapeError(
            f'Weight layout does not match the architecture for block size {weights.block_size}.'
        )
    return weights
