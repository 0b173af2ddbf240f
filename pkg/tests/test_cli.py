#! /usr/bin/env python3
# Copyright (c) oatsu
import numpy as np
import pytest
from conftest import sparse_cloud

from voxelpy import ply, pointcloud
from voxelpy.cli import main
from voxelpy.utils import read_eval_csv
from voxelpy.voxeldnn import load_training_log


@pytest.fixture
def model_args(tmp_path, tiny_models):
    args = []
    for size, model in tiny_models.items():
        path = model.write(tmp_path / f'm{size}.vxdw')
        args += ['--model', f'{size}={path}']
    return args


@pytest.fixture
def small_ply(tmp_path):
    return sparse_cloud(7, 6, seed=21, spread=1).write(tmp_path / 'small.ply')


def test_synth(tmp_path, capsys):
    out = tmp_path / 'synth'
    assert main(['synth', str(out), '--kind', 'cube', '--count', '2', '--depth', '7']) == 0
    assert len(list(out.glob('*.ply'))) == 2
    assert '2 clouds' in capsys.readouterr().out


def test_voxelize(tmp_path):
    raw = [[0.0, 0.0, 0.0], [0.5, 1.0, 2.0], [1.0, 1.0, 1.0]]
    path_in = ply.write_ply(tmp_path / 'raw.ply', raw)
    path_out = tmp_path / 'vox.ply'
    assert main(['-q', 'voxelize', str(path_in), str(path_out), '--depth', '3']) == 0
    points = ply.read_ply(path_out).points
    # 最大の辺 2 を 7 に広げる
    assert points.tolist() == [[0.0, 0.0, 0.0], [2.0, 4.0, 7.0], [4.0, 4.0, 4.0]]


def test_missing_input_file(tmp_path):
    assert main(['voxelize', str(tmp_path / 'nothing.ply'), str(tmp_path / 'out.ply')]) == 3


def test_missing_directory(tmp_path):
    assert main(['augment', str(tmp_path / 'nothing'), str(tmp_path / 'out')]) == 3


def test_bad_magic(tmp_path):
    path = tmp_path / 'junk.bin'
    path.write_bytes(b'JUNK' + bytes(20))
    assert main(['decode', str(path), str(tmp_path / 'out.ply')]) == 21


def test_conflicting_options(tmp_path, small_ply):
    args = ['encode', str(small_ply), str(tmp_path / 'x.bin'), '--extension', '--single-model']
    assert main(args) == 17


def test_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        main(['encode'])
    assert excinfo.value.code == 2


def test_encode_and_decode(tmp_path, capsys, model_args, small_ply):
    path_bin = tmp_path / 'small.bin'
    path_csv = tmp_path / 'leaves.csv'
    args = ['encode', str(small_ply), str(path_bin), '--depth', '7']
    assert main(args + ['--leaf-report', str(path_csv)] + model_args) == 0
    assert 'bpov' in capsys.readouterr().out
    assert path_csv.read_text(encoding='utf-8').startswith('x,y,z,side')

    path_out = tmp_path / 'decoded.ply'
    assert main(['decode', str(path_bin), str(path_out)] + model_args) == 0
    original = pointcloud.from_raw(ply.read_ply(small_ply), 7)
    assert pointcloud.from_raw(ply.read_ply(path_out), 7) == original


def test_encode_with_config_file(tmp_path, tiny_models, small_ply):
    lines = ['depth=7', 'max_level=5']
    for size, model in tiny_models.items():
        model.write(tmp_path / f'm{size}.vxdw')
        lines.append(f'model_{size}=m{size}.vxdw')
    path_conf = tmp_path / 'codec.conf'
    path_conf.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    path_bin = tmp_path / 'small.bin'
    assert main(['encode', str(small_ply), str(path_bin), '--config', str(path_conf)]) == 0
    path_out = tmp_path / 'out.ply'
    assert main(['decode', str(path_bin), str(path_out), '--config', str(path_conf)]) == 0
    assert pointcloud.from_raw(ply.read_ply(path_out), 7) == pointcloud.from_raw(
        ply.read_ply(small_ply), 7
    )


def test_decode_without_models(tmp_path, model_args, small_ply):
    path_bin = tmp_path / 'small.bin'
    assert main(['encode', str(small_ply), str(path_bin), '--depth', '7'] + model_args) == 0
    assert main(['decode', str(path_bin), str(tmp_path / 'out.ply')]) == 18


def test_eval_csv(tmp_path, capsys, model_args, small_ply):
    path_csv = tmp_path / 'eval.csv'
    args = ['eval', str(small_ply), '--depth', '7', '--csv', str(path_csv)]
    assert main(args + model_args) == 0
    assert 'bpov' in capsys.readouterr().out
    rows = read_eval_csv(path_csv)
    assert [row.name for row in rows] == ['small.ply', 'average']
    assert rows[0].bpov == rows[1].bpov
    assert rows[0].points == len(pointcloud.from_raw(ply.read_ply(small_ply), 7))


def test_augment_and_train(tmp_path):
    blocks_dir = tmp_path / 'blocks'
    blocks_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        ply.write_ply(blocks_dir / f'b{i}.ply', rng.integers(0, 8, size=(20, 3)))
    augmented = tmp_path / 'augmented'
    assert main(['augment', str(blocks_dir), str(augmented), '--block-size', '8']) == 0
    assert len(list(augmented.glob('*.ply'))) > 2

    path_weights = tmp_path / 'm8.vxdw'
    args = ['train', str(augmented), str(path_weights), '--block-size', '8', '--epochs', '1',
            '--filters', '2', '--batch', '8']  # fmt: skip
    assert main(args) == 0
    assert path_weights.is_file()
    log = load_training_log(tmp_path / 'm8.vxdw.log')
    assert log.block_size == 8
    assert len(log.epoch_losses) == 1
