#! /usr/bin/env python3
# Copyright (c) oatsu
"""
voxelpy のコマンドラインです。

    voxelpy voxelize IN.ply OUT.ply --depth 10
    voxelpy augment BLOCKS_DIR OUT_DIR --block-size 64
    voxelpy train BLOCKS_DIR OUT.vxdw --block-size 64 --epochs 80
    voxelpy encode IN.ply OUT.bin --config codec.conf
    voxelpy decode IN.bin OUT.ply --config codec.conf
    voxelpy eval A.ply B.ply --config codec.conf --csv result.csv
    voxelpy synth OUT_DIR --kind plane --count 10

結果は標準出力に、ログは標準エラー出力に書く。
"""

import argparse
import logging
import sys

from voxelpy import config as _config
from voxelpy import ply
from voxelpy.errors import VoxelpyError
from voxelpy.pointcloud import voxelize
from voxelpy.synthetic import KINDS, write_corpus
from voxelpy.utils import (
    augment_dir,
    average_row,
    bin2ply,
    evaluate,
    format_table,
    ply2bin,
    train_dir,
    write_eval_csv,
)
from voxelpy.voxeldnn import DEFAULT_EPOCHS, DEFAULT_FILTERS, DEFAULT_LEARNING_RATE, VoxelDnnConfig

EXIT_OK = 0
EXIT_IO_ERROR = 3


def _model_argument(text: str) -> tuple[int, str]:
    """SIZE=PATH の形の引数"""
    size, sep, path = text.partition('=')
    if not sep or not path:
        raise argparse.ArgumentTypeError(f'Model must be given as SIZE=PATH: {text}')
    try:
        return int(size), path
    except ValueError as e:
        raise argparse.ArgumentTypeError(f'Model size must be an integer: {size}') from e


def _codec_config(args) -> _config.CodecConfig:
    """既定値 < 設定ファイル < コマンドライン引数 の順に設定をまとめる"""
    base = _config.load(args.config) if args.config else _config.CodecConfig()
    models = dict(args.model) if getattr(args, 'model', None) else None
    return base.updated(
        depth=getattr(args, 'depth', None),
        max_level=getattr(args, 'max_level', None),
        extension=getattr(args, 'extension', None),
        single_model=getattr(args, 'single_model', None),
        threads=getattr(args, 'threads', None),
        models=models,
    )


def cmd_voxelize(args) -> int:
    pc = voxelize(ply.read_ply(args.input), args.depth)
    pc.write(args.output)
    print(f'{len(pc)} voxels (depth {pc.depth}) -> {args.output}')
    return EXIT_OK


def cmd_augment(args) -> int:
    config = _codec_config(args)
    written = augment_dir(
        args.input,
        args.output,
        args.block_size,
        seed=config.seed if args.seed is None else args.seed,
        rotation=config.augment_rotation and not args.no_rotation,
        sampling=config.augment_sampling and not args.no_sampling,
    )
    print(f'{len(written)} blocks -> {args.output}')
    return EXIT_OK


def cmd_train(args) -> int:
    model_config = VoxelDnnConfig(
        block_size=args.block_size,
        filters=args.filters,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
    )
    weights = train_dir(args.input, args.output, model_config, seed=args.seed)
    digest = weights.architecture_hash
    print(f'block {args.block_size} model (hash {digest:016x}) -> {args.output}')
    return EXIT_OK


def cmd_encode(args) -> int:
    config = _codec_config(args)
    result = ply2bin(args.input, args.output, config, path_leaf_report=args.leaf_report)
    print(result.report())
    for (side, model_size), count in sorted(result.selection_histogram().items()):
        logging.info('block %d coded with model %d: %d times', side, model_size, count)
    return EXIT_OK


def cmd_decode(args) -> int:
    config = _codec_config(args)
    pc = bin2ply(args.input, args.output, config)
    print(f'{len(pc)} voxels (depth {pc.depth}) -> {args.output}')
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _codec_config(args)
    rows = evaluate(args.inputs, config, compare_level1=args.compare_level1)
    rows.append(average_row(rows))
    print(format_table(rows))
    if args.csv:
        write_eval_csv(args.csv, rows)
    return EXIT_OK


def cmd_synth(args) -> int:
    paths = write_corpus(args.output, args.kind, args.count, depth=args.depth, seed=args.seed,
                         density=args.density)  # fmt: skip
    print(f'{len(paths)} clouds -> {args.output}')
    return EXIT_OK


def _add_codec_options(parser, coding: bool = True):
    parser.add_argument('--config', help='key=value 形式の設定ファイル')
    parser.add_argument('--model', action='append', type=_model_argument, metavar='SIZE=PATH',
                        help='ブロックサイズごとの重みファイル (複数指定可)')  # fmt: skip
    if coding:
        parser.add_argument('--depth', type=int, help='ボクセル化のビット深度')
        parser.add_argument('--max-level', type=int, help='分割の最大レベル (1..5)')
        parser.add_argument('--extension', action=argparse.BooleanOptionalAction, default=None,
                            help='コンテキストを拡張する')  # fmt: skip
        parser.add_argument('--single-model', action=argparse.BooleanOptionalAction,
                            default=None, help='64 モデルだけで符号化する')  # fmt: skip
        parser.add_argument('--threads', type=int, help='並列に符号化する 64 ブロックの数')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='voxelpy', description=__doc__.splitlines()[1])
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='デバッグログも出す')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='警告とエラーだけ出す')
    subparsers = parser.add_subparsers(dest='command', required=True)

    p = subparsers.add_parser('voxelize', help='PLYファイルをボクセル化する')
    p.add_argument('input')
    p.add_argument('output')
    p.add_argument('--depth', type=int, default=10)
    p.set_defaults(func=cmd_voxelize)

    p = subparsers.add_parser('augment', help='学習用ブロックをデータ拡張する')
    p.add_argument('input')
    p.add_argument('output')
    p.add_argument('--block-size', type=int, default=64)
    p.add_argument('--seed', type=int)
    p.add_argument('--no-rotation', action='store_true')
    p.add_argument('--no-sampling', action='store_true')
    p.add_argument('--config')
    p.set_defaults(func=cmd_augment)

    p = subparsers.add_parser('train', help='VoxelDNN を学習する')
    p.add_argument('input')
    p.add_argument('output')
    p.add_argument('--block-size', type=int, default=64)
    p.add_argument('--epochs', type=int, default=DEFAULT_EPOCHS)
    p.add_argument('--lr', type=float, default=DEFAULT_LEARNING_RATE)
    p.add_argument('--batch', type=int, help='省略するとブロックサイズごとの既定値')
    p.add_argument('--filters', type=int, default=DEFAULT_FILTERS)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser('encode', help='PLYファイルを符号化する')
    p.add_argument('input')
    p.add_argument('output')
    _add_codec_options(p)
    p.add_argument('--leaf-report', help='ノードごとの表を書き出す CSV')
    p.set_defaults(func=cmd_encode)

    p = subparsers.add_parser('decode', help='ビットストリームを復号する')
    p.add_argument('input')
    p.add_argument('output')
    _add_codec_options(p, coding=False)
    p.set_defaults(func=cmd_decode)

    p = subparsers.add_parser('eval', help='複数のPLYファイルの bpov を表にする')
    p.add_argument('inputs', nargs='+')
    _add_codec_options(p)
    p.add_argument('--csv', help='結果を書き出す CSV')
    p.add_argument('--compare-level1', action='store_true', help='max_level=1 との比較を加える')
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser('synth', help='人工的な点群を作る')
    p.add_argument('output')
    p.add_argument('--kind', choices=KINDS, default='plane')
    p.add_argument('--count', type=int, default=1)
    p.add_argument('--depth', type=int, default=9)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--density', type=float, default=0.01)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    """
    コマンドを実行して終了コードを返す。
    voxelpy の例外はそれぞれの exit_code 、ファイルの読み書きの失敗は 3 になる。
    """
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level, format='%(levelname)s: %(message)s',
                        force=True)  # fmt: skip
    try:
        return args.func(args)
    except VoxelpyError as e:
        logging.error('%s', e)
        return e.exit_code
    except OSError as e:
        logging.error('%s', e)
        return EXIT_IO_ERROR


if __name__ == '__main__':
    sys.exit(main())
