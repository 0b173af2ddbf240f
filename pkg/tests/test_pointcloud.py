#! /usr/bin/env python3
# Copyright (c) oatsu
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxelpy import pointcloud
from voxelpy.errors import ParameterError, ShapeError, UndefinedDensityError
from voxelpy.ply import RawPointCloud
from voxelpy.pointcloud import (
    PointCloud,
    VoxelBlock,
    assemble_blocks,
    augment,
    extract_blocks,
    local_density,
    raster_coords,
    raster_index,
    rotate_block_points,
    subsample,
    voxelize,
)


def as_set(points):
    return {tuple(int(v) for v in p) for p in points}


def test_raster_index_convention():
    assert raster_index(0, 0, 0, 8) == 1
    assert raster_index(0, 0, 1, 8) == 2
    assert raster_index(0, 1, 0, 8) == 9
    assert raster_index(1, 0, 0, 8) == 65
    assert raster_index(7, 7, 7, 8) == 512


@given(st.sampled_from([4, 8, 16, 64]), st.data())
def test_raster_index_is_a_bijection(side, data):
    i = data.draw(st.integers(1, side**3))
    x, y, z = raster_coords(i, side)
    assert raster_index(x, y, z, side) == i


def test_raster_coords_out_of_range():
    with pytest.raises(ParameterError):
        raster_coords(0, 8)
    with pytest.raises(ParameterError):
        raster_coords(513, 8)


def test_voxel_block_flat_order():
    block = VoxelBlock.from_points([[0, 0, 1]], 4)
    assert block.flat.tolist().index(1) == raster_index(0, 0, 1, 4) - 1
    assert block.count == 1
    assert not block.is_empty()
    assert VoxelBlock(4).is_empty()


def test_voxel_block_rejects_bad_values():
    with pytest.raises(ShapeError):
        VoxelBlock(4, np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        VoxelBlock(2, np.full((2, 2, 2), 2))
    with pytest.raises(ParameterError):
        VoxelBlock.from_points([[4, 0, 0]], 4)


def test_point_cloud_deduplicates():
    pc = PointCloud([[1, 2, 3], [1, 2, 3], [0, 0, 0]], 4)
    assert len(pc) == 2
    assert pc.points.tolist() == [[0, 0, 0], [1, 2, 3]]


def test_point_cloud_range_check():
    with pytest.raises(ParameterError):
        PointCloud([[0, 0, 16]], 4)
    with pytest.raises(ParameterError):
        PointCloud([[0, 0, 0]], 0)


def test_voxelize_on_grid():
    pc = voxelize(RawPointCloud([[0, 0, 0], [1, 1, 1]]), 1)
    assert as_set(pc.points) == {(0, 0, 0), (1, 1, 1)}


def test_voxelize_scales_down():
    pc = voxelize(RawPointCloud([[0, 0, 0], [2, 0, 0]]), 1)
    assert as_set(pc.points) == {(0, 0, 0), (1, 0, 0)}


def test_voxelize_rounds_half_up():
    # 範囲 4 を 1 に縮めるので (2, 2, 0) は (0.5, 0.5, 0) になり、切り上げて (1, 1, 0)
    pc = voxelize(RawPointCloud([[0, 0, 0], [4, 0, 0], [2, 2, 0]]), 1)
    assert as_set(pc.points) == {(0, 0, 0), (1, 0, 0), (1, 1, 0)}


def test_voxelize_degenerate_extent():
    pc = voxelize(RawPointCloud([[5.5, 5.5, 5.5]] * 3), 8)
    assert pc.points.tolist() == [[0, 0, 0]]


def test_voxelize_empty():
    with pytest.raises(ParameterError):
        voxelize(RawPointCloud(), 8)


def test_voxelize_random_points(rng):
    pc = voxelize(RawPointCloud(rng.normal(size=(1000, 3)) * 10), 6)
    assert pc.points.min() >= 0
    assert pc.points.max() < 64
    assert len(as_set(pc.points)) == len(pc)


@given(
    st.lists(
        st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False)] * 3), min_size=1, max_size=50
    ),
    st.integers(1, 10),
)
def test_voxelize_is_idempotent(points, depth):
    once = voxelize(RawPointCloud(points), depth)
    twice = voxelize(once.as_raw(), depth)
    assert once == twice


def test_local_density_full_block():
    grid = np.argwhere(np.ones((64, 64, 64), dtype=bool))
    assert local_density(PointCloud(grid, 6)) == pytest.approx(100.0, rel=1e-9)


def test_local_density_two_blocks(rng):
    first = rng.choice(64**3, size=2621, replace=False)
    second = rng.choice(64**3, size=5243, replace=False)
    points = np.concatenate(
        [
            np.stack(np.unravel_index(first, (64,) * 3), axis=1),
            np.stack(np.unravel_index(second, (64,) * 3), axis=1) + [64, 0, 0],
        ]
    )
    expected = (2621 + 5243) / 2 * 100 / 64**3
    assert local_density(PointCloud(points, 7)) == pytest.approx(expected, rel=1e-9)


def test_local_density_single_point():
    assert local_density(PointCloud([[3, 4, 5]], 10)) == pytest.approx(100 / 64**3, rel=1e-9)


def test_local_density_empty():
    with pytest.raises(UndefinedDensityError):
        local_density(PointCloud(np.zeros((0, 3)), 8))


@given(st.integers(0, 2**32 - 1))
def test_extract_then_assemble(seed):
    rng = np.random.default_rng(seed)
    pc = PointCloud(rng.integers(0, 256, size=(200, 3)), 8)
    blocks = extract_blocks(pc, 64)
    origins = [origin for origin, _ in blocks]
    assert origins == sorted(origins)
    assert all(not block.is_empty() for _, block in blocks)
    assert sum(block.count for _, block in blocks) == len(pc)
    assert assemble_blocks(blocks, 8) == pc


def test_rotation_stays_on_grid():
    d = 16
    rotated = rotate_block_points([[d - 1, 0, 0]], d, 45.0, 'z')
    assert rotated.dtype == np.int64
    assert ((rotated >= 0) & (rotated < d)).all()


def test_rotation_axis_check():
    with pytest.raises(ParameterError):
        pointcloud.rotation_matrix(45.0, 'w')


def test_augment_gives_twelve_variants(rng):
    points = rng.integers(0, 16, size=(300, 3))
    variants = augment(points, 16, seed=3)
    assert len(variants) == 12
    for variant in variants:
        assert variant.shape[1] == 3
        if len(variant):
            assert variant.min() >= 0
            assert variant.max() < 16


def test_augment_is_deterministic(rng):
    points = rng.integers(0, 8, size=(100, 3))
    first = augment(points, 8, seed=7)
    second = augment(points, 8, seed=7)
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_augment_toggles(rng):
    points = rng.integers(0, 8, size=(50, 3))
    assert len(augment(points, 8, rotation=False)) == 3
    assert len(augment(points, 8, sampling=False)) == 4
    assert len(augment(points, 8, rotation=False, sampling=False)) == 1


def test_augment_rate_out_of_range(rng):
    with pytest.raises(ParameterError):
        augment(rng.integers(0, 8, size=(5, 3)), 8, sampling_rates=(0.0,))
    with pytest.raises(ParameterError):
        augment(rng.integers(0, 8, size=(5, 3)), 8, sampling_rates=(1.5,))


def test_subsample_full_rate_is_identity(rng):
    points = np.unique(rng.integers(0, 8, size=(40, 3)), axis=0)
    kept = subsample(points, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(kept, points)


def test_subsample_count(rng):
    points = np.unique(rng.integers(0, 16, size=(100, 3)), axis=0)
    kept = subsample(points, 0.4, np.random.default_rng(0))
    assert len(kept) == int(np.floor(0.4 * len(points) + 0.5))
    assert as_set(kept) <= as_set(points)


def test_from_raw_keeps_integer_clouds():
    rpc = RawPointCloud([[0, 0, 0], [3, 2, 1]])
    assert pointcloud.from_raw(rpc, 10).points.tolist() == [[0, 0, 0], [3, 2, 1]]
    # 範囲外なら voxelize する
    scaled = pointcloud.from_raw(RawPointCloud([[0, 0, 0], [3000, 0, 0]]), 10)
    assert scaled.points.max() == 1023


def test_point_cloud_write_and_load(tmp_path):
    pc = PointCloud([[0, 0, 0], [127, 3, 9]], 7)
    pc.write(tmp_path / 'pc.ply')
    assert pointcloud.load(tmp_path / 'pc.ply', 7) == pc
