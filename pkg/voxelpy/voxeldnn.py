#! /usr/bin/env python3
# Copyright (c) oatsu
"""
VoxelDNN のネットワークを組み立てて、学習と確率の予測をするモジュールです。

構成 (ブロックの一辺 d ごとに1つのモデル)
    入力 d³×1
    -> 7³ マスク付き畳み込み (type A) × F, ReLU
    -> 残差ブロック × 2 (5³ type B × F, ReLU, 5³ type B × F, ReLU, スキップ接続で加算)
    -> 1³ type B × F/2, ReLU
    -> 1³ type B × 2
    -> softmax

出力のインデックス i の値は、ラスター順で i より前の入力だけから決まる。
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxelpy.errors import ConfigError, ParameterError, ShapeError, StateError
from voxelpy.nn import (
    Adam,
    MaskedConv3d,
    ModelWeights,
    cross_entropy_backward,
    cross_entropy_loss,
    load_weights,
    masked_conv3d_forward,
    masked_conv3d_region,
    pad_input,
    relu,
    relu_backward,
    softmax2,
)

SUPPORTED_BLOCK_SIZES = (8, 16, 32, 64, 128)
DEFAULT_BATCH_SIZES = {128: 1, 64: 8, 32: 64, 16: 128, 8: 128}
DEFAULT_FILTERS = 64
DEFAULT_EPOCHS = 80
DEFAULT_LEARNING_RATE = 0.001


@dataclass
class VoxelDnnConfig:
    """
    VoxelDNN の構成と学習の設定。
    batch_size が None のときはブロックサイズごとの既定値を使う。
    check_mode を True にすると 64ビット浮動小数点で計算する (勾配の確認用)。
    """

    block_size: int = 64
    filters: int = DEFAULT_FILTERS
    first_kernel: int = 7
    residual_kernel: int = 5
    residual_blocks: int = 2
    lr: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int | None = None
    check_mode: bool = False

    def __post_init__(self):
        if self.block_size not in SUPPORTED_BLOCK_SIZES:
            raise ConfigError(
                f'Unsupported block size {self.block_size}. '
                f'Choose from {", ".join(map(str, SUPPORTED_BLOCK_SIZES))}.'
            )
        if self.filters < 2:
            raise ConfigError(f'filters must be >= 2: {self.filters}')
        if self.epochs < 0:
            raise ConfigError(f'epochs must be >= 0: {self.epochs}')
        if self.lr <= 0:
            raise ConfigError(f'lr must be positive: {self.lr}')
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1: {self.batch_size}')
        for kernel in (self.first_kernel, self.residual_kernel):
            if kernel < 1 or kernel % 2 == 0:
                raise ConfigError(f'Kernel size must be a positive odd number: {kernel}')

    @property
    def head_filters(self) -> int:
        return max(1, self.filters // 2)

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return DEFAULT_BATCH_SIZES[self.block_size]

    @property
    def dtype(self):
        return np.float64 if self.check_mode else np.float32

    def conv_specs(self) -> list[tuple[str, int, int, int, str]]:
        """(名前, 入力チャンネル, 出力チャンネル, カーネル, マスク) を層の順に返す"""
        f = self.filters
        k = self.residual_kernel
        specs = [('conv_a', 1, f, self.first_kernel, 'A')]
        for r in range(1, self.residual_blocks + 1):
            specs.append((f'res{r}.conv1', f, f, k, 'B'))
            specs.append((f'res{r}.conv2', f, f, k, 'B'))
        specs.append(('head1', f, self.head_filters, 1, 'B'))
        specs.append(('head2', self.head_filters, 2, 1, 'B'))
        return specs

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """重みファイルに入る (層の名前, 形) のリスト"""
        result = []
        for name, c_in, c_out, k, _ in self.conv_specs():
            result.append((f'{name}.weight', (c_out, c_in, k, k, k)))
            result.append((f'{name}.bias', (c_out,)))
        return result

    @property
    def receptive_radius(self) -> int:
        """入力の1ボクセルが変わったときに出力が変わりうる範囲の半径"""
        return sum(k // 2 for _, _, _, k, _ in self.conv_specs())


class VoxelDNN:
    """
    VoxelDNN 本体。forward はバッチ (B, 1, d, d, d) を受け取ってロジット (B, 2, d, d, d) を返す。
    """

    def __init__(self, config: VoxelDnnConfig, seed: int | None = 0):
        self.config = config
        self.layers = {
            name: MaskedConv3d(name, c_in, c_out, k, kind, dtype=config.dtype)
            for name, c_in, c_out, k, kind in config.conv_specs()
        }
        if seed is not None:
            rng = np.random.default_rng(seed)
            for layer in self.layers.values():
                layer.initialize(rng)
        self._cache = None

    def __repr__(self):
        return f'VoxelDNN(block_size={self.block_size}, filters={self.config.filters})'

    @property
    def block_size(self) -> int:
        return self.config.block_size

    @classmethod
    def from_weights(cls, weights: ModelWeights, check_mode: bool = False):
        """
        重みからモデルを作る。フィルタ数は最初の層から読み取る。
        層の名前か形が構成と合わないときは ShapeError 。
        """
        try:
            first = weights['conv_a.weight']
        except KeyError as e:
            raise ShapeError('Weights have no layer "conv_a.weight".') from e
        residual_blocks = sum(1 for name in weights if name.endswith('.conv1.weight'))
        residual_kernel = 5
        if 'res1.conv1.weight' in weights:
            residual_kernel = int(weights['res1.conv1.weight'].shape[-1])
        config = VoxelDnnConfig(
            block_size=weights.block_size,
            filters=int(first.shape[0]),
            first_kernel=int(first.shape[-1]),
            residual_kernel=residual_kernel,
            residual_blocks=residual_blocks,
            check_mode=check_mode,
        )
        if weights.layout != config.layout():
            raise ShapeError(
                f'Weight layout does not match the VoxelDNN architecture '
                f'for block size {weights.block_size}.'
            )
        model = cls(config, seed=None)
        model.set_parameters(dict(weights))
        return model

    @classmethod
    def load(cls, path, check_mode: bool = False):
        """重みファイルからモデルを作る"""
        return cls.from_weights(load_weights(path), check_mode=check_mode)

    def parameters(self) -> dict:
        params = {}
        for layer in self.layers.values():
            weight_name, bias_name = layer.parameter_names
            params[weight_name] = layer.weight
            params[bias_name] = layer.bias
        return params

    def gradients(self) -> dict:
        grads = {}
        for layer in self.layers.values():
            weight_name, bias_name = layer.parameter_names
            grads[weight_name] = layer.grad_weight
            grads[bias_name] = layer.grad_bias
        return grads

    def set_parameters(self, params: dict):
        for layer in self.layers.values():
            weight_name, bias_name = layer.parameter_names
            weight = np.asarray(params[weight_name], dtype=layer.dtype)
            bias = np.asarray(params[bias_name], dtype=layer.dtype)
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise ShapeError(f'Parameter shape mismatch at layer {layer.name}')
            # マスクの外は常に 0 にしておく
            layer.weight = (weight * layer.spec.mask).astype(layer.dtype)
            layer.bias = bias.copy()

    def weights(self) -> ModelWeights:
        """現在の重みを ModelWeights にする"""
        return ModelWeights(self.block_size, self.parameters())

    @property
    def architecture_hash(self) -> int:
        return self.weights().architecture_hash

    def write(self, path) -> Path:
        return self.weights().write(path)

    def _as_batch(self, x) -> np.ndarray:
        if hasattr(x, 'occupancy'):
            x = x.occupancy
        x = np.asarray(x)
        d = self.block_size
        if x.ndim == 3:
            x = x[np.newaxis, np.newaxis]
        elif x.ndim == 4:
            x = x[:, np.newaxis]
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (d, d, d):
            raise ShapeError(f'Input shape {x.shape} does not fit a model of block size {d}.')
        return x.astype(self.config.dtype, copy=False)

    def forward(self, x, keep_cache: bool = True) -> np.ndarray:
        """
        ロジットを計算する。keep_cache が True なら backward のために途中の値を覚えておく。
        False のときはモデルの状態を変えないので、複数のスレッドから同時に呼べる。
        """
        x = self._as_batch(x)
        cache = {}

        def conv(name, value):
            layer = self.layers[name]
            if keep_cache:
                return layer.forward(value)
            return masked_conv3d_forward(value, layer.weight, layer.bias, layer.spec, layer.dtype)

        pre = conv('conv_a', x)
        cache['conv_a'] = pre
        h = relu(pre)
        for r in range(1, self.config.residual_blocks + 1):
            u = conv(f'res{r}.conv1', h)
            v = conv(f'res{r}.conv2', relu(u))
            cache[f'res{r}.conv1'] = u
            cache[f'res{r}.conv2'] = v
            h = h + relu(v)
        g = conv('head1', h)
        cache['head1'] = g
        logits = conv('head2', relu(g))
        if keep_cache:
            self._cache = cache
        return logits

    def backward(self, grad_logits: np.ndarray):
        """
        forward の逆伝播。各層の grad_weight / grad_bias に勾配が入る。
        """
        cache = self._cache
        if cache is None:
            raise StateError('Forward cache is missing. Call forward before backward.')
        layers = self.layers
        grad = layers['head2'].backward(grad_logits.astype(self.config.dtype))
        grad = relu_backward(grad, cache['head1'])
        grad_h = layers['head1'].backward(grad)
        for r in range(self.config.residual_blocks, 0, -1):
            grad_v = relu_backward(grad_h, cache[f'res{r}.conv2'])
            grad_u = layers[f'res{r}.conv2'].backward(grad_v)
            grad_u = relu_backward(grad_u, cache[f'res{r}.conv1'])
            grad_h = grad_h + layers[f'res{r}.conv1'].backward(grad_u)
        grad = relu_backward(grad_h, cache['conv_a'])
        return layers['conv_a'].backward(grad)

    def predict(self, x) -> np.ndarray:
        """
        確率を返す。入力が1ブロックなら (2, d, d, d) 、バッチなら (B, 2, d, d, d) 。
        """
        single = np.ndim(getattr(x, 'occupancy', x)) == 3
        probs = softmax2(self.forward(x, keep_cache=False))
        return probs[0] if single else probs

    def clear_cache(self):
        self._cache = None
        for layer in self.layers.values():
            layer.clear_cache()

    def loss(self, blocks) -> float:
        """blocks (B, d, d, d) に対する交差エントロピー (ビット/ボクセル)"""
        blocks = np.asarray(blocks)
        probs = softmax2(self.forward(blocks, keep_cache=False))
        return cross_entropy_loss(probs, blocks)

    def causal_predictor(self, context) -> 'CausalPredictor':
        return CausalPredictor(self, context)


class CausalPredictor:
    """
    復号用の予測器。

    最初に全体を1回計算し、その後は set_voxel で占有にしたボクセルの
    受容野の範囲だけを層ごとに計算し直す。計算し直した値は全体を計算したときと
    ビット単位で一致する。
    """

    def __init__(self, model: VoxelDNN, context):
        self.model = model
        self.config = model.config
        d = model.block_size
        context = np.asarray(getattr(context, 'occupancy', context))
        if context.shape != (d, d, d):
            raise ShapeError(f'Context shape {context.shape} does not fit block size {d}.')
        dtype = self.config.dtype
        self.side = d
        # 各畳み込み層のパディング済み入力
        self.inputs = {}
        for name, c_in, _, k, _ in self.config.conv_specs():
            self.inputs[name] = pad_input(np.zeros((1, c_in, d, d, d), dtype=dtype), k // 2)
        self.logits = np.zeros((1, 2, d, d, d), dtype=dtype)
        self._set_input(context)
        self._propagate((0, 0, 0), (d, d, d))
        self.recompute_count = 0

    def _set_input(self, context):
        p = self.model.layers['conv_a'].spec.padding
        d = self.side
        self.inputs['conv_a'][0, 0, p : p + d, p : p + d, p : p + d] = context

    def _write(self, name, lo, hi, values):
        p = self.model.layers[name].spec.padding
        self.inputs[name][
            :, :, lo[0] + p : hi[0] + p, lo[1] + p : hi[1] + p, lo[2] + p : hi[2] + p
        ] = values

    def _read(self, name, lo, hi):
        p = self.model.layers[name].spec.padding
        return self.inputs[name][
            :, :, lo[0] + p : hi[0] + p, lo[1] + p : hi[1] + p, lo[2] + p : hi[2] + p
        ]

    def _conv(self, name, lo, hi):
        layer = self.model.layers[name]
        return masked_conv3d_region(
            self.inputs[name], layer.weight, layer.bias, layer.spec.taps, lo, hi, layer.dtype
        )

    def _grow(self, lo, hi, radius):
        """
        受容野の分だけ範囲を広げる。マスクはラスター順で因果的なので、
        変わった位置より前の x 面の出力は変わらない。x の下限はそのままにする。
        """
        d = self.side
        return (
            (lo[0], max(lo[1] - radius, 0), max(lo[2] - radius, 0)),
            tuple(min(v + radius, d) for v in hi),
        )

    def _propagate(self, changed_lo, changed_hi):
        """
        [changed_lo, changed_hi) の入力が変わったときに、影響する範囲を順に計算し直す。
        """
        layers = self.model.layers
        box = self._grow(changed_lo, changed_hi, layers['conv_a'].spec.padding)
        h = relu(self._conv('conv_a', *box))
        stream_name = 'res1.conv1' if self.config.residual_blocks > 0 else 'head1'
        self._write(stream_name, *box, h)
        for r in range(1, self.config.residual_blocks + 1):
            box = self._grow(*box, layers[f'res{r}.conv1'].spec.padding)
            u = self._conv(f'res{r}.conv1', *box)
            self._write(f'res{r}.conv2', *box, relu(u))
            box = self._grow(*box, layers[f'res{r}.conv2'].spec.padding)
            v = self._conv(f'res{r}.conv2', *box)
            h = self._read(f'res{r}.conv1', *box) + relu(v)
            next_name = f'res{r + 1}.conv1' if r < self.config.residual_blocks else 'head1'
            self._write(next_name, *box, h)
        g = self._conv('head1', *box)
        self._write('head2', *box, relu(g))
        out = self._conv('head2', *box)
        lo, hi = box
        self.logits[:, :, lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = out

    def set_voxel(self, x: int, y: int, z: int, value: int = 1):
        """コンテキストのボクセルを書き換えて、影響する範囲を計算し直す"""
        p = self.model.layers['conv_a'].spec.padding
        current = self.inputs['conv_a'][0, 0, x + p, y + p, z + p]
        if current == value:
            return
        self.inputs['conv_a'][0, 0, x + p, y + p, z + p] = value
        self._propagate((x, y, z), (x + 1, y + 1, z + 1))
        self.recompute_count += 1

    def probabilities(self) -> np.ndarray:
        """現在の (p0, p1) 全体。形は (2, d, d, d) 。"""
        return softmax2(self.logits)[0]

    def p1(self, x: int, y: int, z: int) -> float:
        """ボクセル (x, y, z) が占有されている確率"""
        return float(softmax2(self.logits[:, :, x : x + 1, y : y + 1, z : z + 1])[0, 1, 0, 0, 0])


def _as_model(model) -> VoxelDNN:
    if isinstance(model, ModelWeights):
        return VoxelDNN.from_weights(model)
    return model


def build_model(config: VoxelDnnConfig, seed: int = 0) -> ModelWeights:
    """構成どおりの形の重みを乱数で初期化して返す"""
    return VoxelDNN(config, seed=seed).weights()


def predict_block(model, context) -> np.ndarray:
    """
    コンテキスト (d³) の全ボクセルの (p0, p1) を1回で計算する。形は (2, d, d, d) 。
    """
    model = _as_model(model)
    context = np.asarray(getattr(context, 'occupancy', context))
    d = model.block_size
    if context.shape != (d, d, d):
        raise ShapeError(f'Context of shape {context.shape} does not fit block size {d}.')
    return model.predict(context)


def place_at_origin(block, size: int) -> np.ndarray:
    """小さいブロックを 0 で埋めた size³ の原点側の角に置く"""
    occupancy = np.asarray(getattr(block, 'occupancy', block))
    d = occupancy.shape[0]
    if d > size:
        raise ConfigError(f'Block of side {d} does not fit into {size}.')
    context = np.zeros((size, size, size), dtype=np.uint8)
    context[:d, :d, :d] = occupancy
    return context


def predict_small_in_64(model64, block) -> np.ndarray:
    """
    64 未満のブロックを 0 で埋めた 64 ブロックの原点側に置いて 64 モデルで予測する。
    戻り値はブロックの位置だけを切り出した (2, d, d, d) 。
    """
    model64 = _as_model(model64)
    if model64.block_size != 64:
        raise ConfigError(f'predict_small_in_64 needs the 64 model, got {model64.block_size}.')
    occupancy = np.asarray(getattr(block, 'occupancy', block))
    d = occupancy.shape[0]
    if d >= 64:
        raise ConfigError(f'Block side must be smaller than 64: {d}')
    probs = model64.predict(place_at_origin(occupancy, 64))
    return probs[:, :d, :d, :d]


@dataclass
class TrainingLog:
    """
    学習のメタデータ。重みファイルの横に <重みファイル>.log として書き出す。
    """

    seed: int = 0
    block_size: int = 64
    filters: int = DEFAULT_FILTERS
    epochs: int = 0
    lr: float = DEFAULT_LEARNING_RATE
    batch_size: int = 1
    dataset_size: int = 0
    dataset_digest: str = ''
    initial_loss: float = float('nan')
    epoch_losses: list = field(default_factory=list)

    def __str__(self):
        lines = [
            f'seed={self.seed}',
            f'block_size={self.block_size}',
            f'filters={self.filters}',
            f'epochs={self.epochs}',
            f'lr={self.lr!r}',
            f'batch_size={self.batch_size}',
            f'dataset_size={self.dataset_size}',
            f'dataset_digest={self.dataset_digest}',
            f'initial_loss={self.initial_loss!r}',
        ]
        lines += [f'epoch_{i}={loss!r}' for i, loss in enumerate(self.epoch_losses, 1)]
        return '\n'.join(lines) + '\n'

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(str(self), encoding='utf-8')
        return path


def load_training_log(path) -> TrainingLog:
    """TrainingLog.write で書き出したファイルを読み取る"""
    with open(path, encoding='utf-8') as f:
        lines = [line.strip() for line in f if line.strip()]
    log = TrainingLog()
    for line in lines:
        key, value = line.split('=', 1)
        if key.startswith('epoch_'):
            log.epoch_losses.append(float(value))
        elif key in ('seed', 'block_size', 'filters', 'epochs', 'batch_size', 'dataset_size'):
            setattr(log, key, int(value))
        elif key in ('lr', 'initial_loss'):
            setattr(log, key, float(value))
        elif key == 'dataset_digest':
            log.dataset_digest = value
        else:
            logging.warning('Unknown key in training log: %s', key)
    return log


def training_log_path(weights_path) -> Path:
    """重みファイルに対応するメタデータのパス"""
    weights_path = Path(weights_path)
    return weights_path.with_name(weights_path.name + '.log')


def dataset_digest(blocks: np.ndarray) -> str:
    """学習データの sha256"""
    sha = hashlib.sha256()
    sha.update(np.asarray(blocks.shape, dtype='<i8').tobytes())
    sha.update(np.packbits(blocks.astype(np.uint8).reshape(-1)).tobytes())
    return sha.hexdigest()


def _stack_dataset(dataset, block_size: int) -> np.ndarray:
    blocks = [np.asarray(getattr(b, 'occupancy', b)) for b in dataset]
    if not blocks:
        raise ParameterError('Training dataset is empty.')
    for b in blocks:
        if b.shape != (block_size,) * 3:
            raise ShapeError(f'Training block of shape {b.shape} does not match {block_size}.')
    return np.stack(blocks).astype(np.uint8)


class Trainer:
    """
    Adam で交差エントロピーを最小化する。同じシードなら同じ重みになる。
    """

    def __init__(self, config: VoxelDnnConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.model = VoxelDNN(config, seed=seed)
        self.optimizer = Adam(lr=config.lr)
        self.log = TrainingLog(
            seed=seed,
            block_size=config.block_size,
            filters=config.filters,
            epochs=config.epochs,
            lr=config.lr,
            batch_size=config.effective_batch_size,
        )

    def fit(self, dataset, callback=None) -> ModelWeights:
        """
        dataset を学習する。callback(epoch, loss) はエポックごとに呼ばれる。
        """
        blocks = _stack_dataset(dataset, self.config.block_size)
        rng = np.random.default_rng(self.seed)
        batch_size = self.config.effective_batch_size
        self.log.dataset_size = len(blocks)
        self.log.dataset_digest = dataset_digest(blocks)
        self.log.initial_loss = self.evaluate(blocks)
        logging.info(
            'initial loss: %.6f bits/voxel (%d blocks)', self.log.initial_loss, len(blocks)
        )

        for epoch in range(1, self.config.epochs + 1):
            order = rng.permutation(len(blocks))
            total = 0.0
            for start in range(0, len(blocks), batch_size):
                batch = blocks[order[start : start + batch_size]]
                total += self.step(batch) * len(batch)
            epoch_loss = total / len(blocks)
            self.log.epoch_losses.append(epoch_loss)
            logging.info('epoch %d/%d: %.6f bits/voxel', epoch, self.config.epochs, epoch_loss)
            if callback is not None:
                callback(epoch, epoch_loss)
        return self.model.weights()

    def step(self, batch: np.ndarray) -> float:
        """1ミニバッチ分の更新。更新前のロスを返す。"""
        model = self.model
        probs = softmax2(model.forward(batch))
        loss = cross_entropy_loss(probs, batch)
        model.backward(cross_entropy_backward(probs, batch))
        model.set_parameters(self.optimizer.step(model.parameters(), model.gradients()))
        model.clear_cache()
        return loss

    def evaluate(self, blocks: np.ndarray, batch_size: int | None = None) -> float:
        """全ブロックの平均ロス"""
        batch_size = batch_size or self.config.effective_batch_size
        total = 0.0
        for start in range(0, len(blocks), batch_size):
            batch = blocks[start : start + batch_size]
            total += self.model.loss(batch) * len(batch)
        return total / len(blocks)


def train(config: VoxelDnnConfig, dataset, seed: int = 0) -> ModelWeights:
    """Trainer をまとめて呼ぶ"""
    return Trainer(config, seed=seed).fit(dataset)
