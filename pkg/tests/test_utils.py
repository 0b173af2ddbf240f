#! /usr/bin/env python3
# Copyright (c) oatsu
import numpy as np
import pytest
from conftest import sparse_cloud, tiny_config

from voxelpy import ply
from voxelpy.config import CodecConfig
from voxelpy.errors import ParameterError
from voxelpy.utils import (
    EvalRow,
    augment_dir,
    average_row,
    bin2ply,
    evaluate,
    format_table,
    load_block_dataset,
    ply2bin,
    read_eval_csv,
    train_dir,
    write_eval_csv,
)
from voxelpy.voxeldnn import VoxelDNN, load_training_log

ROWS = [
    EvalRow('a.ply', 100, 1.5, 800, 8.0, 20.0, -3.0),
    EvalRow('b.ply', 301, 0.1 + 0.2, 1001, 1001 / 301, 12.5, 1.0),
]


def test_average_row():
    row = average_row(ROWS)
    assert row.name == 'average'
    assert row.points == 200
    assert row.density == pytest.approx((1.5 + 0.3) / 2)
    assert row.bits == 900
    assert row.bpov == pytest.approx((8.0 + 1001 / 301) / 2)
    assert row.side_info_share == pytest.approx(16.25)
    assert row.gain_vs_level1 == pytest.approx(-1.0)


def test_average_row_without_gain():
    rows = [EvalRow('a.ply', 1, 1.0, 8, 8.0, 50.0), EvalRow('b.ply', 3, 3.0, 16, 16 / 3, 30.0)]
    assert average_row(rows).gain_vs_level1 is None


def test_eval_csv_round_trip(tmp_path):
    rows = ROWS + [average_row(ROWS)]
    path = write_eval_csv(tmp_path / 'eval.csv', rows)
    assert read_eval_csv(path) == rows


def test_eval_csv_drops_empty_gain_column(tmp_path):
    rows = [EvalRow('a.ply', 1, 1.0, 8, 8.0, 50.0)]
    path = write_eval_csv(tmp_path / 'eval.csv', rows)
    assert 'gain_vs_level1' not in path.read_text(encoding='utf-8')
    assert read_eval_csv(path) == rows


def test_format_table():
    lines = format_table(ROWS).splitlines()
    assert lines[0].split('\t')[:3] == ['name', 'points', 'density']
    assert lines[1].split('\t')[4] == '8.000000'
    assert len(lines) == 3


def test_evaluate(tmp_path, tiny_models):
    pc = sparse_cloud(7, 5, seed=31, spread=1)
    path = pc.write(tmp_path / 'one.ply')
    rows = evaluate([path], CodecConfig(depth=7), models=tiny_models, compare_level1=True)
    assert len(rows) == 1
    row = rows[0]
    assert row.name == 'one.ply'
    assert row.points == len(pc)
    assert row.bits % 8 == 0
    assert row.bpov == row.bits / row.points
    # 64 ブロックを丸ごと1つで符号化するより分割したほうが短い
    assert row.gain_vs_level1 < 0


def test_ply2bin_and_bin2ply(tmp_path, tiny_models):
    pc = sparse_cloud(8, 6, seed=32)
    path_ply = pc.write(tmp_path / 'in.ply')
    config = CodecConfig(depth=8)
    result = ply2bin(path_ply, tmp_path / 'in.bin', config, models=tiny_models,
                     path_leaf_report=tmp_path / 'leaves.csv')  # fmt: skip
    assert (tmp_path / 'in.bin').stat().st_size == len(result.data)
    assert (tmp_path / 'leaves.csv').is_file()
    decoded = bin2ply(tmp_path / 'in.bin', tmp_path / 'out.ply', config, models=tiny_models)
    assert decoded == pc
    assert (tmp_path / 'out.ply').is_file()


def write_blocks(directory, side, count, seed=0):
    directory.mkdir()
    rng = np.random.default_rng(seed)
    for i in range(count):
        ply.write_ply(directory / f'block{i}.ply', rng.integers(0, side, size=(30, 3)))
    return directory


def test_augment_dir(tmp_path):
    in_dir = write_blocks(tmp_path / 'blocks', 16, 2)
    written = augment_dir(in_dir, tmp_path / 'out', 16, seed=1)
    assert 0 < len(written) <= 24
    assert written[0].name == 'block0_v00.ply'
    for path in written:
        points = ply.read_ply(path).points
        assert points.min() >= 0
        assert points.max() < 16


def test_augment_dir_without_rotation(tmp_path):
    in_dir = write_blocks(tmp_path / 'blocks', 8, 1)
    written = augment_dir(in_dir, tmp_path / 'out', 8, rotation=False)
    assert [p.name for p in written] == ['block0_v00.ply', 'block0_v01.ply', 'block0_v02.ply']


def test_augment_dir_errors(tmp_path):
    in_dir = write_blocks(tmp_path / 'blocks', 32, 1)
    with pytest.raises(ParameterError):
        augment_dir(in_dir, tmp_path / 'out', 12)
    with pytest.raises(ParameterError):
        augment_dir(in_dir, tmp_path / 'out', 16)
    with pytest.raises(FileNotFoundError):
        augment_dir(tmp_path / 'nothing', tmp_path / 'out', 16)


def test_load_block_dataset(tmp_path):
    in_dir = write_blocks(tmp_path / 'blocks', 16, 3)
    blocks = load_block_dataset(in_dir, 8)
    assert all(block.side == 8 for block in blocks)
    assert 3 <= len(blocks) <= 24
    with pytest.raises(FileNotFoundError):
        load_block_dataset(tmp_path / 'nothing', 8)


def test_train_dir(tmp_path):
    in_dir = write_blocks(tmp_path / 'blocks', 8, 4)
    config = tiny_config(8, epochs=2, batch_size=2)
    path_weights = tmp_path / 'm8.vxdw'
    weights = train_dir(in_dir, path_weights, config, seed=3)
    assert VoxelDNN.load(path_weights).weights() == weights
    log = load_training_log(tmp_path / 'm8.vxdw.log')
    assert log.seed == 3
    assert log.dataset_size == 4
    assert len(log.epoch_losses) == 2
