#! /usr/bin/env python3
# Copyright (c) oatsu
import time

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelpy import synthetic
from voxelpy.errors import ConfigError, ParameterError, ShapeError, StateError
from voxelpy.nn import cross_entropy_backward, softmax2
from voxelpy.voxeldnn import (
    CausalPredictor,
    Trainer,
    TrainingLog,
    VoxelDNN,
    VoxelDnnConfig,
    build_model,
    load_training_log,
    place_at_origin,
    predict_block,
    predict_small_in_64,
    train,
    training_log_path,
)


def random_block(rng, side=8, density=0.2):
    return (rng.random((side,) * 3) < density).astype(np.uint8)


def test_output_shape(tiny_models, rng):
    model = tiny_models[8]
    blocks = np.stack([random_block(rng), random_block(rng)])
    assert model.forward(blocks, keep_cache=False).shape == (2, 2, 8, 8, 8)
    assert model.predict(blocks).shape == (2, 2, 8, 8, 8)
    assert model.predict(blocks[0]).shape == (2, 8, 8, 8)


def test_default_architecture():
    config = VoxelDnnConfig(block_size=64)
    specs = config.conv_specs()
    assert [kind for *_, kind in specs].count('A') == 1
    assert specs[0] == ('conv_a', 1, 64, 7, 'A')
    assert [name for name, *_ in specs] == [
        'conv_a',
        'res1.conv1',
        'res1.conv2',
        'res2.conv1',
        'res2.conv2',
        'head1',
        'head2',
    ]
    assert specs[-2][2] == 32
    assert specs[-1][2] == 2
    assert config.effective_batch_size == 8


def test_config_validation():
    with pytest.raises(ConfigError):
        VoxelDnnConfig(block_size=12)
    with pytest.raises(ConfigError):
        VoxelDnnConfig(filters=1)
    with pytest.raises(ConfigError):
        VoxelDnnConfig(first_kernel=4)
    with pytest.raises(ConfigError):
        VoxelDnnConfig(lr=0)


def test_same_seed_same_weights():
    config = tiny_config(8)
    assert VoxelDNN(config, seed=5).weights() == VoxelDNN(config, seed=5).weights()
    assert VoxelDNN(config, seed=5).weights() != VoxelDNN(config, seed=6).weights()
    assert build_model(config, seed=5) == VoxelDNN(config, seed=5).weights()


def test_zero_head_gives_one_half(rng):
    model = VoxelDNN(tiny_config(8), seed=1)
    params = model.parameters()
    params['head2.weight'] = np.zeros_like(params['head2.weight'])
    params['head2.bias'] = np.zeros_like(params['head2.bias'])
    model.set_parameters(params)
    assert (model.predict(random_block(rng)) == 0.5).all()


@pytest.mark.parametrize('index', [0, 100, 300, 511])
def test_causality_by_perturbation(tiny_models, rng, index):
    model = tiny_models[8]
    block = random_block(rng)
    flipped = block.copy()
    flipped.reshape(-1)[index] ^= 1
    before = model.forward(block, keep_cache=False).reshape(2, -1)
    after = model.forward(flipped, keep_cache=False).reshape(2, -1)
    assert before[:, : index + 1].tobytes() == after[:, : index + 1].tobytes()


def test_sequential_equivalence(tiny_models, rng):
    # 位置 i の出力は、i 以降を 0 にしたブロックでの出力と一致する
    model = tiny_models[16]
    block = random_block(rng, 16, 0.3)
    full = model.forward(block, keep_cache=False).reshape(2, -1)
    for i in (1, 77, 2049, 4095):
        partial = block.copy().reshape(-1)
        partial[i:] = 0
        out = model.forward(partial.reshape((16,) * 3), keep_cache=False).reshape(2, -1)
        assert out[:, i].tobytes() == full[:, i].tobytes()


def test_causal_predictor_matches_forward(tiny_models, rng):
    model = tiny_models[8]
    block = random_block(rng, 8, 0.1)
    predictor = CausalPredictor(model, np.zeros((8, 8, 8), dtype=np.uint8))
    empty = model.forward(np.zeros((8, 8, 8)), keep_cache=False)
    assert predictor.logits.tobytes() == empty.tobytes()
    for x, y, z in np.argwhere(block):
        predictor.set_voxel(int(x), int(y), int(z))
    assert predictor.recompute_count == int(block.sum())
    assert predictor.logits.tobytes() == model.forward(block, keep_cache=False).tobytes()
    probs = model.predict(block)
    assert predictor.probabilities().tobytes() == probs.tobytes()
    assert predictor.p1(3, 4, 5) == probs[1, 3, 4, 5]


@pytest.mark.parametrize('side', [8, 16])
@settings(max_examples=100)
@given(data=st.data())
def test_causality_random_flips(tiny_models, side, data):
    # 位置 i を反転しても、i までの出力は変わらない
    model = tiny_models[side]
    seed = data.draw(st.integers(0, 2**32 - 1))
    density = data.draw(st.sampled_from([0.01, 0.1, 0.5, 0.9]))
    index = data.draw(st.integers(0, side**3 - 1))
    block = random_block(np.random.default_rng(seed), side, density)
    flipped = block.copy()
    flipped.reshape(-1)[index] ^= 1
    before = model.forward(block, keep_cache=False).reshape(2, -1)
    after = model.forward(flipped, keep_cache=False).reshape(2, -1)
    assert before[:, : index + 1].tobytes() == after[:, : index + 1].tobytes()


@pytest.mark.parametrize('side', [8, 16])
@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1), density=st.floats(0.01, 0.6))
def test_causal_predictor_per_voxel(tiny_models, side, seed, density):
    # 復号と同じくラスター順に進めると、各位置の出力はそこで既に完成したブロックの出力と一致する
    model = tiny_models[side]
    block = random_block(np.random.default_rng(seed), side, density)
    full = model.forward(block, keep_cache=False)[0]
    predictor = model.causal_predictor(np.zeros((side,) * 3, dtype=np.uint8))
    for x in range(side):
        for y in range(side):
            for z in range(side):
                assert predictor.logits[0, :, x, y, z].tobytes() == full[:, x, y, z].tobytes()
                if block[x, y, z]:
                    predictor.set_voxel(x, y, z)
    assert predictor.logits[0].tobytes() == full.tobytes()


def test_causal_predictor_out_of_order(tiny_models, rng):
    # ラスター順でなくても、0 に戻しても一致する
    model = tiny_models[8]
    block = random_block(rng, 8, 0.3)
    predictor = model.causal_predictor(np.zeros((8, 8, 8)))
    for x, y, z in rng.permutation(np.argwhere(block)):
        predictor.set_voxel(int(x), int(y), int(z))
    predictor.set_voxel(7, 7, 7, 0)
    predictor.set_voxel(0, 0, 0, 0)
    block[7, 7, 7] = 0
    block[0, 0, 0] = 0
    assert predictor.logits.tobytes() == model.forward(block, keep_cache=False).tobytes()


@pytest.mark.slow
@pytest.mark.parametrize('density', [0.001, 0.05, 0.3, 0.5])
def test_causal_predictor_speed(tiny_models, rng, density):
    # 16 ブロックをラスター順に埋めていく (復号と同じ使い方)
    model = tiny_models[16]
    block = random_block(rng, 16, density)
    start = time.perf_counter()
    predictor = model.causal_predictor(np.zeros((16, 16, 16)))
    for x, y, z in np.argwhere(block):
        predictor.p1(int(x), int(y), int(z))
        predictor.set_voxel(int(x), int(y), int(z))
    elapsed = time.perf_counter() - start
    assert predictor.logits.tobytes() == model.forward(block, keep_cache=False).tobytes()
    assert elapsed < 30


def test_causal_predictor_same_value_is_noop(tiny_models):
    predictor = tiny_models[8].causal_predictor(np.zeros((8, 8, 8)))
    predictor.set_voxel(1, 2, 3, 0)
    assert predictor.recompute_count == 0


def test_causal_predictor_shape_check(tiny_models):
    with pytest.raises(ShapeError):
        CausalPredictor(tiny_models[8], np.zeros((16, 16, 16)))


def test_predict_block(tiny_models, rng):
    block = random_block(rng, 16)
    probs = predict_block(tiny_models[16], block)
    assert probs.shape == (2, 16, 16, 16)
    assert (probs[0] + probs[1] == 1.0).all()
    with pytest.raises(ShapeError):
        predict_block(tiny_models[16], random_block(rng, 8))
    # 重みを渡しても同じ
    weights = tiny_models[16].weights()
    assert predict_block(weights, block).tobytes() == probs.tobytes()


def test_predict_small_in_64(tiny_models, rng):
    model64 = tiny_models[64]
    block = random_block(rng, 8, 0.3)
    probs = predict_small_in_64(model64, block)
    assert probs.shape == (2, 8, 8, 8)
    context = np.zeros((64, 64, 64), dtype=np.uint8)
    context[:8, :8, :8] = block
    full = model64.predict(context)
    for x, y, z in [(0, 0, 0), (7, 7, 7), (3, 0, 6)]:
        assert probs[1, x, y, z] == full[1, x, y, z]


def test_predict_small_in_64_errors(tiny_models, rng):
    with pytest.raises(ConfigError):
        predict_small_in_64(tiny_models[64], np.zeros((64, 64, 64)))
    with pytest.raises(ConfigError):
        predict_small_in_64(tiny_models[8], random_block(rng, 4))


def test_place_at_origin(rng):
    block = random_block(rng, 4, 0.5)
    context = place_at_origin(block, 16)
    assert context.shape == (16, 16, 16)
    np.testing.assert_array_equal(context[:4, :4, :4], block)
    assert context.sum() == block.sum()
    with pytest.raises(ConfigError):
        place_at_origin(np.zeros((32, 32, 32)), 16)


def test_weights_round_trip(tmp_path, tiny_models, rng):
    model = tiny_models[16]
    path = model.write(tmp_path / 'm16.vxdw')
    loaded = VoxelDNN.load(path)
    assert loaded.config.layout() == model.config.layout()
    assert loaded.architecture_hash == model.architecture_hash
    block = random_block(rng, 16)
    assert loaded.predict(block).tobytes() == model.predict(block).tobytes()


def test_from_weights_layout_check(tiny_models):
    weights = tiny_models[8].weights()
    del weights['head1.bias']
    with pytest.raises(ShapeError):
        VoxelDNN.from_weights(weights)


def test_backward_without_forward():
    with pytest.raises(StateError):
        VoxelDNN(tiny_config(8)).backward(np.zeros((1, 2, 8, 8, 8)))


def test_model_gradients_check_mode(rng):
    model = VoxelDNN(tiny_config(8, check_mode=True), seed=3)
    # バイアスが 0 のままだと ReLU の折れ目にちょうど乗る活性が出るのでずらしておく
    params = model.parameters()
    for name in params:
        if name.endswith('.bias'):
            params[name] = rng.uniform(-0.1, 0.1, size=params[name].shape)
    model.set_parameters(params)
    batch = np.stack([random_block(rng, 8, 0.3), random_block(rng, 8, 0.3)])
    probs = softmax2(model.forward(batch))
    model.backward(cross_entropy_backward(probs, batch))
    grads = {name: value.copy() for name, value in model.gradients().items()}
    model.clear_cache()
    base = {name: value.copy() for name, value in model.parameters().items()}
    h = 1e-6
    checks = [
        ('head2.bias', (1,)),
        ('head2.weight', (0, 1, 0, 0, 0)),
        ('head1.weight', (1, 2, 0, 0, 0)),
        ('res1.conv2.weight', (2, 3, 1, 1, 1)),
        ('res1.conv1.bias', (0,)),
        ('conv_a.weight', (3, 0, 0, 1, 2)),
        ('conv_a.weight', (1, 0, 1, 1, 0)),
    ]
    for name, index in checks:
        plus = {k: v.copy() for k, v in base.items()}
        minus = {k: v.copy() for k, v in base.items()}
        plus[name][index] += h
        minus[name][index] -= h
        model.set_parameters(plus)
        loss_plus = model.loss(batch)
        model.set_parameters(minus)
        loss_minus = model.loss(batch)
        numeric = (loss_plus - loss_minus) / (2 * h)
        assert grads[name][index] == pytest.approx(numeric, rel=1e-5, abs=1e-9), name
    model.set_parameters(base)


def test_training_reduces_loss(rng):
    config = tiny_config(8, lr=0.01, epochs=3, batch_size=4)
    blocks = [b.occupancy for b in synthetic.plane_blocks(16, side=8, seed=2)]
    trainer = Trainer(config, seed=0)
    trainer.fit(blocks)
    assert len(trainer.log.epoch_losses) == 3
    assert trainer.evaluate(np.stack(blocks)) < trainer.log.initial_loss


def test_training_empty_dataset():
    with pytest.raises(ParameterError):
        train(tiny_config(8, epochs=1), [])


def test_training_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        train(tiny_config(8, epochs=1), [random_block(rng, 16)])


def test_training_on_empty_blocks():
    config = tiny_config(8, lr=0.1, epochs=5, batch_size=1)
    blocks = [np.zeros((8, 8, 8), dtype=np.uint8)] * 64
    trainer = Trainer(config, seed=0)
    trainer.fit(blocks)
    assert trainer.evaluate(np.stack(blocks)) <= 0.01


def test_training_is_deterministic(tmp_path):
    config = tiny_config(8, lr=0.01, epochs=2, batch_size=4)
    blocks = synthetic.plane_blocks(12, side=8, seed=4)
    first = train(config, blocks, seed=9).write(tmp_path / 'a.vxdw')
    second = train(config, blocks, seed=9).write(tmp_path / 'b.vxdw')
    assert first.read_bytes() == second.read_bytes()


def test_training_callback():
    calls = []
    config = tiny_config(8, epochs=2, batch_size=8)
    blocks = synthetic.plane_blocks(8, side=8)
    Trainer(config).fit(blocks, callback=lambda epoch, loss: calls.append(epoch))
    assert calls == [1, 2]


def test_training_log_round_trip(tmp_path):
    log = TrainingLog(
        seed=3,
        block_size=16,
        filters=8,
        epochs=2,
        lr=0.001,
        batch_size=128,
        dataset_size=40,
        dataset_digest='ab' * 32,
        initial_loss=0.9876543210123,
        epoch_losses=[0.5, 0.1 + 0.2],
    )
    path = log.write(training_log_path(tmp_path / 'm16.vxdw'))
    assert path.name == 'm16.vxdw.log'
    assert load_training_log(path) == log


@pytest.mark.slow
def test_learns_planes():
    blocks = synthetic.plane_blocks(64, side=16, seed=0)
    stacked = np.stack([b.occupancy for b in blocks])
    p = stacked.mean()
    entropy = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    config = tiny_config(16, filters=8, first_kernel=5, lr=0.01, epochs=50, batch_size=16)
    trainer = Trainer(config, seed=0)
    trainer.fit(blocks)
    assert trainer.evaluate(stacked) < 0.5 * entropy
