#! /usr/bin/env python3
# Copyright (c) oatsu
"""
PLYファイルの頂点座標を扱うモジュールです。

- 読み取り: ASCII と binary_little_endian。x, y, z 以外のプロパティは無視する。
- 書き出し: 常に binary_little_endian の float32。
"""

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError

from voxelpy.errors import ParameterError, PlyParseError, UnsupportedFormatError

SUPPORTED_FORMATS = ('ascii', 'binary_little_endian')
VERTEX_DTYPE = np.dtype([('x', '<f4'), ('y', '<f4'), ('z', '<f4')])


class RawPointCloud:
    """
    ボクセル化する前の点群。座標は実数。
    """

    def __init__(self, points=None):
        if points is None:
            points = np.zeros((0, 3), dtype=np.float64)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ParameterError('RawPointCloud accepts finite coordinates only.')
        self.points = points

    def __len__(self):
        return len(self.points)

    def __str__(self):
        return '\n'.join(f'{x} {y} {z}' for x, y, z in self.points)

    def write(self, path):
        """PLYファイルに書き出す"""
        return write_ply(path, self.points)


def _read_header_lines(path) -> list[str]:
    """
    end_header までの行を取得する。
    plyfile より先に format 行と vertex 要素を確認するために使う。
    """
    lines = []
    with open(path, mode='rb') as f:
        for raw_line in f:
            line = raw_line.decode('ascii', errors='replace').strip()
            lines.append(line)
            if line == 'end_header':
                break
    return lines


def _check_header(path):
    """
    フォーマットと vertex 要素の x, y, z を確認する。
    問題があるときは行番号付きで PlyParseError を投げる。
    """
    lines = _read_header_lines(path)
    if not lines or lines[0] != 'ply':
        raise PlyParseError('PLY header must start with "ply"', line=1)
    if lines[-1] != 'end_header':
        raise PlyParseError('PLY header has no "end_header"', line=len(lines))

    vertex_line = None
    vertex_properties = set()
    current_element = None
    for i, line in enumerate(lines, 1):
        words = line.split()
        if not words:
            continue
        if words[0] == 'format':
            if len(words) < 2:
                raise PlyParseError('PLY format line is incomplete', line=i)
            if words[1] == 'binary_big_endian':
                raise UnsupportedFormatError(f'Unsupported PLY format: {words[1]}')
            if words[1] not in SUPPORTED_FORMATS:
                raise PlyParseError(f'Unknown PLY format: {words[1]}', line=i)
        elif words[0] == 'element':
            current_element = words[1] if len(words) > 1 else None
            if current_element == 'vertex':
                vertex_line = i
        elif words[0] == 'property' and current_element == 'vertex':
            vertex_properties.add(words[-1])

    if vertex_line is None:
        raise PlyParseError('PLY header declares no vertex element', line=len(lines))
    missing = [axis for axis in ('x', 'y', 'z') if axis not in vertex_properties]
    if missing:
        raise PlyParseError(f'vertex element has no property {", ".join(missing)}', vertex_line)


def read_ply(path) -> RawPointCloud:
    """
    PLYファイルを読み取って RawPointCloud にする。
    """
    path = str(path).strip('\'"')
    _check_header(path)
    try:
        plydata = PlyData.read(path)
    except PlyHeaderParseError as e:
        raise PlyParseError(str(e), line=e.line) from e
    except PlyElementParseError as e:
        raise PlyParseError(str(e)) from e
    except (ValueError, EOFError) as e:
        # データ部分が途中で切れているとき
        raise PlyParseError(f'Broken PLY data: {e}') from e

    vertex = plydata['vertex'].data
    points = np.column_stack([np.asarray(vertex[axis], dtype=np.float64) for axis in 'xyz'])
    return RawPointCloud(points)


def write_ply(path, points) -> Path:
    """
    座標を binary_little_endian float32 の PLYファイルとして書き出す。
    """
    points = np.asarray(points).reshape(-1, 3)
    vertex = np.empty(len(points), dtype=VERTEX_DTYPE)
    vertex['x'] = points[:, 0]
    vertex['y'] = points[:, 1]
    vertex['z'] = points[:, 2]
    plydata = PlyData([PlyElement.describe(vertex, 'vertex')], text=False, byte_order='<')
    path = Path(str(path).strip('\'"'))
    plydata.write(str(path))
    return path


load = read_ply
write = write_ply
