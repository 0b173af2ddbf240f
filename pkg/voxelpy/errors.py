#! /usr/bin/env python3
# Copyright (c) oatsu
"""
voxelpy で使う例外クラスをまとめたモジュールです。

どの例外も VoxelpyError を継承し、種類に合う組み込み例外も継承する。
ほとんどは ValueError で、StateError だけ RuntimeError 、MissingModelError だけ LookupError 。
exit_code は CLI の終了コードに使う。
"""


class VoxelpyError(Exception):
    """voxelpy の例外の基底クラス"""

    exit_code = 1


class PlyParseError(VoxelpyError, ValueError):
    """
    PLYファイルのヘッダーやデータが読めないときの例外。
    line にはヘッダー内の行番号 (1始まり) が入る。わからないときは None。
    """

    exit_code = 10

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f'{message} (line {line})'
        super().__init__(message)


class UnsupportedFormatError(VoxelpyError, ValueError):
    """binary_big_endian などの未対応フォーマット"""

    exit_code = 11


class UndefinedDensityError(VoxelpyError, ValueError):
    """点が1つもなくて局所密度が定義できない"""

    exit_code = 12


class ParameterError(VoxelpyError, ValueError):
    """関数の引数が範囲外"""

    exit_code = 13


class UnsupportedDepthError(VoxelpyError, ValueError):
    """ビット深度が小さすぎて 64 ブロックに分割できない"""

    exit_code = 14


class ShapeError(VoxelpyError, ValueError):
    """テンソルや重みの形が合わない"""

    exit_code = 15


class StateError(VoxelpyError, RuntimeError):
    """順序がおかしい呼び出し (flush の二重呼び出しなど)"""

    exit_code = 16


class ConfigError(VoxelpyError, ValueError):
    """設定値が不正"""

    exit_code = 17


class MissingModelError(VoxelpyError, LookupError):
    """必要なブロックサイズのモデルが読み込まれていない"""

    exit_code = 18


class IncompatibleWeightsError(VoxelpyError, ValueError):
    """重みファイルのマジック・バージョン・ハッシュが合わない"""

    exit_code = 19


class CorruptStreamError(VoxelpyError, ValueError):
    """ビットストリームが途中で切れている、または値が不正"""

    exit_code = 20


class BadMagicError(CorruptStreamError):
    """ビットストリームの先頭が VXPC ではない"""

    exit_code = 21


class UnsupportedVersionError(CorruptStreamError):
    """対応しているより新しいバージョンのビットストリーム"""

    exit_code = 22
