import struct
from dataclasses import replace

import numpy as np
import pytest

from v2a_mapper.errors import ContractError, FormatError, MigrationError, ShapeError
from v2a_mapper.models import MapperConfig, init_params
from v2a_mapper.oracle import OracleConfig, gen_paired
from v2a_mapper.training import (
    AdamState,
    TrainConfig,
    adamw_step,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    regression_loss,
    save_checkpoint,
    stream,
    train,
)

REG = MapperConfig(variant="reg-mlp", dim=8, depth=1, expansion=4)
DIFF = MapperConfig(variant="diff-transformer", dim=8, depth=2, heads=2, head_dim=4, max_timesteps=100)


def test_regression_loss_examples():
    t = np.ones((1, 512))
    assert regression_loss(t, t).data == 0.0
    assert regression_loss(np.zeros((1, 512)), t).data == 512.0
    pred = np.zeros((2, 2))
    target = np.array([[1.0, 1.0], [2.0, 0.0]])
    assert regression_loss(pred, target).data == 3.0
    with pytest.raises(ContractError):
        regression_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def test_adamw_null_update():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adamw_decay_only():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
    assert np.allclose(p["w"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_adamw_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-3])
    p = {"w": np.zeros(3)}
    adamw_step(p, {"w": g}, AdamState.zeros_like(p), lr=0.01)
    assert np.allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    # beta2 = 0: signed update at step 1 as well
    p = {"w": np.zeros(3)}
    adamw_step(p, {"w": g}, AdamState.zeros_like(p), lr=0.01, beta2=0.0)
    assert np.allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adamw_two_steps_reference():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.1
    g1, g2 = np.array([1.0, -0.5]), np.array([0.2, 0.4])
    p = {"w": np.array([0.5, 0.5])}
    st = AdamState.zeros_like(p)
    adamw_step(p, {"w": g1}, st, lr, b1, b2, eps, wd)
    adamw_step(p, {"w": g2}, st, lr, b1, b2, eps, wd)
    w, m, v = np.array([0.5, 0.5]), np.zeros(2), np.zeros(2)
    for k, g in enumerate((g1, g2), start=1):
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    assert np.allclose(p["w"], w, rtol=1e-14) and st.step == 2


def test_adamw_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1)


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(drop_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(aggregator="max")
    paper = TrainConfig.paper()
    assert (paper.batch_size, paper.lr, paper.epochs, paper.drop_rate, paper.timesteps) == (448, 1.1e-4, 100, 0.1, 1000)


def test_streams_are_independent():
    a = stream(0, "shuffle", 3).random(4)
    assert np.array_equal(a, stream(0, "shuffle", 3).random(4))
    assert not np.array_equal(a, stream(0, "noise", 3).random(4))
    assert not np.array_equal(a, stream(0, "shuffle", 4).random(4))


@pytest.fixture(scope="module")
def data():
    samples, handle = gen_paired(OracleConfig(dim=8, n_samples=512, n_clusters=4, seed=2))
    return samples


def test_regression_training_converges(data):
    ck = train(REG, data, TrainConfig.desk(epochs=40))
    h = ck.loss_history
    assert len(h) == 40 and h[-1] < 0.05 * h[0]
    windows = np.convolve(h, np.ones(5) / 5, mode="valid")[::5]
    assert np.all(np.diff(windows) <= 0)


def test_zero_lr_keeps_loss_constant(data):
    ck = train(REG, data, TrainConfig.desk(epochs=4, lr=0.0, weight_decay=0.0))
    init = init_params(REG, int(stream(0, "init").integers(2**31)))
    assert all(np.array_equal(ck.params[k], init[k]) for k in init)
    # batches differ per epoch, so float32 summation order does too
    assert np.ptp(ck.loss_history) <= 1e-6 * ck.loss_history[0]


def test_zero_epochs_is_initialization(data):
    ck = train(REG, data, TrainConfig.desk(epochs=0))
    init = init_params(REG, int(stream(0, "init").integers(2**31)))
    assert ck.loss_history == [] and all(np.array_equal(ck.params[k], init[k]) for k in init)


def test_training_is_bit_deterministic(data):
    a = encode_checkpoint(train(DIFF, data, TrainConfig.desk(epochs=2, timesteps=100)))
    b = encode_checkpoint(train(DIFF, data, TrainConfig.desk(epochs=2, timesteps=100)))
    assert a == b


def test_train_contract_errors(data):
    with pytest.raises(ContractError):
        train(REG, [], TrainConfig.desk(epochs=1))
    with pytest.raises(ShapeError):
        train(replace(REG, dim=16), data, TrainConfig.desk(epochs=1))
    with pytest.raises(ContractError):
        train(DIFF, data, TrainConfig.desk(epochs=1, timesteps=50))


def test_accepts_prepared_arrays(rng):
    v, a = rng.normal(size=(64, 8)), rng.normal(size=(64, 8))
    ck = train(REG, (v, a), TrainConfig.desk(epochs=3))
    assert ck.epoch == 3 and ck.loss_history[-1] < ck.loss_history[0]


def test_random_aggregator_redraw_changes_inputs(data):
    fixed = train(REG, data, TrainConfig.desk(epochs=3, aggregator="random"))
    redraw = train(REG, data, TrainConfig.desk(epochs=3, aggregator="random", redraw_random=True))
    assert fixed.loss_history[0] == redraw.loss_history[0]
    assert fixed.loss_history[1:] != redraw.loss_history[1:]


def test_checkpoint_roundtrip_trained_diff_transformer(tmp_path, data):
    ck = train(DIFF, data, TrainConfig.desk(epochs=2, timesteps=100))
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.mapper == ck.mapper and back.train == ck.train
    assert back.epoch == 2 and back.loss_history == ck.loss_history and back.opt.step == ck.opt.step
    for k in ck.params:
        assert np.array_equal(back.params[k], ck.params[k])
        assert np.array_equal(back.opt.m[k], ck.opt.m[k]) and np.array_equal(back.opt.v[k], ck.opt.v[k])
    assert encode_checkpoint(back) == encode_checkpoint(ck)


def test_checkpoint_negative_cases(data):
    buf = encode_checkpoint(train(REG, data, TrainConfig.desk(epochs=0)))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(MigrationError):
        decode_checkpoint(buf[:4] + struct.pack("<I", 99) + buf[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-3])
    (blob_len,) = struct.unpack_from("<I", buf, 8)
    with pytest.raises(FormatError):
        decode_checkpoint(buf[: 12 + blob_len])


def test_resume_matches_uninterrupted(data):
    for mapper in (REG, DIFF):
        cfg = TrainConfig.desk(epochs=4, timesteps=100, seed=5)
        full = train(mapper, data, cfg)
        half = decode_checkpoint(encode_checkpoint(train(mapper, data, replace(cfg, epochs=2))))
        resumed = train(mapper, data, cfg, resume=half)
        assert encode_checkpoint(resumed) == encode_checkpoint(full)


def test_resume_rejects_other_mapper(data):
    ck = train(REG, data, TrainConfig.desk(epochs=1))
    with pytest.raises(ContractError):
        train(replace(REG, expansion=2), data, TrainConfig.desk(epochs=2), resume=ck)
