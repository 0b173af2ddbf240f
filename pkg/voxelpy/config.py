#! /usr/bin/env python3
# Copyright (c) oatsu
"""
コーデックの設定ファイルを扱うモジュールです。

設定ファイルは1行に1つ key=value を書く。# から始まる行と空行は無視する。
    depth=10
    max_level=5
    extension=true
    model_64=weights/voxeldnn64.vxdw

優先順位は 既定値 < 設定ファイル < コマンドライン引数 。
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from voxelpy.errors import ConfigError
from voxelpy.octree import MIN_DEPTH
from voxelpy.partition import MAX_LEVEL
from voxelpy.voxeldnn import DEFAULT_FILTERS, SUPPORTED_BLOCK_SIZES, VoxelDNN

TRUE_WORDS = ('true', '1', 'yes', 'on')
FALSE_WORDS = ('false', '0', 'no', 'off')
MODEL_KEY_PREFIX = 'model_'


def _parse_bool(key: str, value: str) -> bool:
    word = value.strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ConfigError(f'{key} must be a boolean (true/false): {value}')


@dataclass
class CodecConfig:
    """
    符号化・復号・学習の設定。
    models はブロックサイズ -> 重みファイルのパス。
    """

    depth: int = 10
    max_level: int = MAX_LEVEL
    extension: bool = False
    single_model: bool = False
    models: dict = field(default_factory=dict)
    seed: int = 0
    augment_rotation: bool = True
    augment_sampling: bool = True
    threads: int = 1
    filters: int = DEFAULT_FILTERS

    def __post_init__(self):
        self.validate()

    def validate(self):
        """値の範囲と組み合わせを確かめる"""
        if not 1 <= self.max_level <= MAX_LEVEL:
            raise ConfigError(f'max_level must be in 1..{MAX_LEVEL}: {self.max_level}')
        if self.depth < MIN_DEPTH:
            raise ConfigError(f'depth must be >= {MIN_DEPTH} for coding: {self.depth}')
        if self.extension and self.single_model:
            raise ConfigError('extension and single_model cannot be enabled together.')
        if self.threads < 1:
            raise ConfigError(f'threads must be >= 1: {self.threads}')
        if self.filters < 2:
            raise ConfigError(f'filters must be >= 2: {self.filters}')
        for size in self.models:
            if size not in SUPPORTED_BLOCK_SIZES:
                raise ConfigError(
                    f'No model can be given for block size {size}. '
                    f'Choose from {", ".join(map(str, SUPPORTED_BLOCK_SIZES))}.'
                )

    def updated(self, **overrides):
        """
        None 以外の値で上書きした新しい設定を返す。
        models は辞書どうしをまとめる。
        """
        values = {k: v for k, v in overrides.items() if v is not None}
        if 'models' in values:
            values['models'] = {**self.models, **values['models']}
        return replace(self, **values)

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'models':
                for size, path in sorted(value.items()):
                    lines.append(f'{MODEL_KEY_PREFIX}{size}={path}')
            elif isinstance(value, bool):
                lines.append(f'{f.name}={str(value).lower()}')
            else:
                lines.append(f'{f.name}={value}')
        return lines

    def write(self, path) -> Path:
        """設定ファイルとして書き出す"""
        path = Path(path)
        path.write_text('\n'.join(self.to_lines()) + '\n', encoding='utf-8')
        return path

    def load_models(self) -> dict:
        """
        設定されている重みファイルを全部読み込んで、ブロックサイズ -> VoxelDNN の辞書にする。
        """
        models = {}
        for size, path in sorted(self.models.items()):
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f'Model file for block size {size} does not exist: {path}')
            model = VoxelDNN.load(path)
            if model.block_size != size:
                raise ConfigError(
                    f'{path} holds a model for block size {model.block_size}, not {size}.'
                )
            digest = model.architecture_hash
            logging.info('loaded model %d from %s (hash %016x)', size, path, digest)
            models[size] = model
        return models


def parse_lines(lines, base_dir=None) -> dict:
    """
    key=value の行を CodecConfig の引数の辞書にする。
    モデルの相対パスは base_dir からの相対パスとして扱う。
    """
    names = {f.name: f for f in fields(CodecConfig)}
    values = {}
    models = {}
    for i, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f'Line {i} is not key=value: {line}')
        key, value = (s.strip() for s in line.split('=', 1))
        value = value.strip('"')
        if key.startswith(MODEL_KEY_PREFIX):
            try:
                size = int(key[len(MODEL_KEY_PREFIX) :])
            except ValueError as e:
                raise ConfigError(f'Invalid model key at line {i}: {key}') from e
            path = Path(value)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            models[size] = str(path)
        elif key not in names or key == 'models':
            raise ConfigError(f'Unknown key at line {i}: {key}')
        elif names[key].type in (bool, 'bool'):
            values[key] = _parse_bool(key, value)
        else:
            try:
                values[key] = int(value)
            except ValueError as e:
                raise ConfigError(f'{key} must be an integer at line {i}: {value}') from e
    if models:
        values['models'] = models
    return values


def load(path, encoding='utf-8') -> CodecConfig:
    """
    設定ファイルを読み取って CodecConfig にする。
    """
    path = Path(str(path).strip('"'))
    try:
        with open(path, encoding=encoding) as f:
            lines = f.readlines()
    except UnicodeDecodeError:
        with open(path, encoding='cp932') as f:
            lines = f.readlines()
    return CodecConfig(**parse_lines(lines, base_dir=path.parent))
