#! /usr/bin/env python3
# Copyright (c) oatsu
"""
複数のPLYファイルを符号化して bpov の表を作る。
"""

import csv
import logging
from dataclasses import dataclass, fields
from pathlib import Path

from voxelpy import ply
from voxelpy.codec import decode_point_cloud, encode_point_cloud
from voxelpy.config import CodecConfig
from voxelpy.errors import CorruptStreamError
from voxelpy.pointcloud import from_raw, local_density

AVERAGE_NAME = 'average'


@dataclass
class EvalRow:
    """
    1つの点群の評価結果。
    gain_vs_level1 は max_level=1 と比べたビット数の増減 (%) で、負なら減っている。
    """

    name: str
    points: int
    density: float
    bits: int
    bpov: float
    side_info_share: float
    gain_vs_level1: float | None = None


def average_row(rows: list[EvalRow]) -> EvalRow:
    """各列の平均の行"""
    n = len(rows)
    gains = [r.gain_vs_level1 for r in rows if r.gain_vs_level1 is not None]
    return EvalRow(
        name=AVERAGE_NAME,
        points=round(sum(r.points for r in rows) / n),
        density=sum(r.density for r in rows) / n,
        bits=round(sum(r.bits for r in rows) / n),
        bpov=sum(r.bpov for r in rows) / n,
        side_info_share=sum(r.side_info_share for r in rows) / n,
        gain_vs_level1=sum(gains) / len(gains) if gains else None,
    )


def evaluate(paths, config: CodecConfig, models: dict | None = None,
             compare_level1: bool = False, verify: bool = True) -> list[EvalRow]:  # fmt: skip
    """
    各ファイルを符号化して1行ずつ評価する。平均の行は average_row で作る。
    verify が True なら復号して元の点群と一致するか確かめる。
    """
    models = config.load_models() if models is None else models
    rows = []
    for path in paths:
        path = Path(path)
        pc = from_raw(ply.read_ply(path), config.depth)
        options = {
            'extension': config.extension,
            'single_model': config.single_model,
            'threads': config.threads,
        }
        result = encode_point_cloud(pc, models, max_level=config.max_level, **options)
        if verify and decode_point_cloud(result.data, models) != pc:
            raise CorruptStreamError(f'Decoded point cloud differs from the input: {path}')
        report = result.report()
        gain = None
        if compare_level1:
            base = encode_point_cloud(pc, models, max_level=1, **options)
            gain = 100.0 * (result.total_bits - base.total_bits) / base.total_bits
        row = EvalRow(path.name, len(pc), local_density(pc), result.total_bits, report.bpov,
                      report.side_info_share, gain)  # fmt: skip
        logging.info('%s: %.6f bpov', row.name, row.bpov)
        rows.append(row)
    return rows


def _columns(rows) -> list[str]:
    names = [f.name for f in fields(EvalRow)]
    if all(r.gain_vs_level1 is None for r in rows):
        names.remove('gain_vs_level1')
    return names


def format_table(rows: list[EvalRow]) -> str:
    """画面表示用の表"""
    columns = _columns(rows)
    lines = ['\t'.join(columns)]
    for row in rows:
        values = []
        for name in columns:
            value = getattr(row, name)
            values.append(f'{value:.6f}' if isinstance(value, float) else str(value))
        lines.append('\t'.join(values))
    return '\n'.join(lines)


def write_eval_csv(path, rows: list[EvalRow]) -> Path:
    """CSVに書き出す。浮動小数点は読み戻したときに同じ値になる表記にする。"""
    path = Path(path)
    columns = _columns(rows)
    with open(path, mode='w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            values = [getattr(row, name) for name in columns]
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in values])
    return path


def read_eval_csv(path) -> list[EvalRow]:
    """write_eval_csv の逆"""
    with open(path, encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        rows = []
        for record in reader:
            gain = record.get('gain_vs_level1')
            rows.append(
                EvalRow(
                    name=record['name'],
                    points=int(record['points']),
                    density=float(record['density']),
                    bits=int(record['bits']),
                    bpov=float(record['bpov']),
                    side_info_share=float(record['side_info_share']),
                    gain_vs_level1=float(gain) if gain not in (None, '', 'None') else None,
                )
            )
    return rows
