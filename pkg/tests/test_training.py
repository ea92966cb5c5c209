import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adam_scalar
from pansr.checkpoint import Checkpoint, pack_tensors, unpack_tensors
from pansr.data import DatasetManifest, synthetic_image
from pansr.exceptions import ConfigError, DataError, NonFiniteError
from pansr.imaging import bicubic_resize, to_u8
from pansr.nn import ModelConfig, build_pan
from pansr.tensor import Tensor, backward
from pansr.training import (
    AdamState,
    LogRow,
    TrainConfig,
    Trainer,
    adam_step,
    cosine_lr,
    format_loss_csv,
    l1_loss,
)

TINY = ModelConfig(scale=2, nf=8, unf=6, num_blocks=1)


def fixture_manifest(seed=7):
    hr = synthetic_image(64, 64, seed=seed)
    lr = to_u8(bicubic_resize(hr, Fraction(1, 2)))
    return DatasetManifest.from_arrays([lr], [hr], 2)


def small_train(**kw):
    base = dict(batch_size=2, hr_patch=16, total_iters=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_cosine_endpoints():
    cfg = TrainConfig(max_lr=1e-3, min_lr=1e-7, cosine_period=100)
    assert cosine_lr(0, cfg) == pytest.approx(1e-3)
    assert cosine_lr(50, cfg) == pytest.approx((1e-3 + 1e-7) / 2)
    assert cosine_lr(100, cfg) == pytest.approx(1e-3)  # restart
    assert cosine_lr(99, cfg) < 1e-6
    single = TrainConfig(max_lr=1e-3, min_lr=1e-7, cosine_period=100, restarts=False)
    assert cosine_lr(100, single) == pytest.approx(1e-7)
    assert cosine_lr(1000, single) == pytest.approx(1e-7)
    with pytest.raises(ValueError):
        cosine_lr(-1, cfg)


@settings(max_examples=200, deadline=None)
@given(it=st.integers(0, 10**7), period=st.integers(1, 10**6), restarts=st.booleans())
def test_cosine_stays_within_bounds(it, period, restarts):
    cfg = TrainConfig(max_lr=2e-3, min_lr=1e-6, cosine_period=period, restarts=restarts)
    assert 1e-6 <= cosine_lr(it, cfg) <= 2e-3


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(min_lr=1.0, max_lr=0.1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0).validate()


def test_adam_matches_scalar_reference():
    c = np.array([0.3, -1.2, 2.0, 0.0])
    x0 = np.array([1.0, 1.0, -1.0, 0.5])
    grad = lambda x: [2 * (xi - ci) for xi, ci in zip(x, c)]  # noqa: E731
    expected = adam_scalar(list(x0), grad, lr=0.05, steps=10)

    params = {"w": x0.reshape(1, 1, 2, 2).copy()}
    state = AdamState.zeros_like(params)
    for _ in range(10):
        g = 2 * (params["w"] - c.reshape(1, 1, 2, 2))
        adam_step(params, {"w": g}, state, 0.05)
    assert state.step == 10
    np.testing.assert_allclose(params["w"].ravel(), expected, rtol=0, atol=1e-12)


def test_adam_runs_in_param_dtype():
    params = {"w": np.ones((1, 1, 2, 2), dtype=np.float32)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.ones((1, 1, 2, 2), dtype=np.float32)}, state, 1e-3)
    assert params["w"].dtype == np.float32 and state.m["w"].dtype == np.float32


def test_adam_rejects_non_finite_gradient():
    params = {"fe.weight": np.zeros((1, 1, 1, 1))}
    state = AdamState.zeros_like(params)
    with pytest.raises(NonFiniteError, match="fe.weight"):
        adam_step(params, {"fe.weight": np.full((1, 1, 1, 1), np.nan)}, state, 1e-3)
    assert state.step == 0 and params["fe.weight"][0, 0, 0, 0] == 0


def test_l1_loss_value_and_grad(rng):
    p = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True, dtype=np.float64)
    t = Tensor(rng.standard_normal((2, 1, 3, 3)), dtype=np.float64)
    loss = l1_loss(p, t)
    assert loss.item() == pytest.approx(np.mean(np.abs(p.data - t.data)))
    backward(loss)
    np.testing.assert_allclose(p.grad, np.sign(p.data - t.data) / p.data.size)


@settings(max_examples=30, deadline=None)
@given(shapes=st.lists(st.tuples(*[st.integers(1, 4)] * 4), min_size=1, max_size=5),
       seed=st.integers(0, 1000))
def test_pack_round_trip_is_bitwise(shapes, seed):
    r = np.random.default_rng(seed)
    tensors = {f"t{i}": r.standard_normal(s).astype(np.float32) for i, s in enumerate(shapes)}
    back = unpack_tensors(pack_tensors(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_detects_corruption():
    ckpt = Checkpoint(build_pan(TINY).state_dict(), iteration=3)
    data = bytearray(ckpt.to_bytes())
    assert Checkpoint.from_bytes(bytes(data)).iteration == 3
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(DataError, match="checksum"):
        Checkpoint.from_bytes(bytes(data))
    with pytest.raises(DataError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(DataError):
        Checkpoint.from_bytes(bytes(data[:-20]))


def test_checkpoint_file_round_trip(tmp_path):
    trainer = Trainer(build_pan(TINY, seed=3), fixture_manifest(), small_train(total_iters=2))
    for ckpt in trainer.run():
        pass
    ckpt.save(tmp_path / "c.pan")
    back = Checkpoint.load(tmp_path / "c.pan")
    assert back.iteration == 2 and back.adam_step == 2
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(ckpt, group), getattr(back, group)
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert back.rng_state == ckpt.rng_state
    assert ModelConfig.from_dict(back.model_config) == TINY
    assert not list(tmp_path.glob("*.tmp*"))


def test_zero_iterations_checkpoint_equals_init():
    init = build_pan(TINY, seed=3).state_dict()
    trainer = Trainer(build_pan(TINY, seed=3), fixture_manifest(), small_train(total_iters=0))
    ckpts = list(trainer.run())
    assert len(ckpts) == 1 and ckpts[0].iteration == 0
    assert all(np.array_equal(ckpts[0].params[k], init[k]) for k in init)


def test_resume_is_bitwise_identical():
    cfg = small_train(total_iters=8)
    full = Trainer(build_pan(TINY, seed=3), fixture_manifest(), cfg)
    final = list(full.run())[-1]

    first = Trainer(build_pan(TINY, seed=3), fixture_manifest(), cfg)
    mid = list(first.run(until=5))[-1]
    resumed = Trainer.from_checkpoint(Checkpoint.from_bytes(mid.to_bytes()), fixture_manifest())
    again = list(resumed.run())[-1]

    assert again.to_bytes() == final.to_bytes()
    assert [r.loss for r in first.history + resumed.history] == [r.loss for r in full.history]


def test_periodic_checkpoints():
    trainer = Trainer(build_pan(TINY, seed=3), fixture_manifest(),
                      small_train(total_iters=7, checkpoint_every=3))
    assert [c.iteration for c in trainer.run()] == [3, 6, 7]


def test_non_finite_loss_aborts_with_batch_indices():
    hr = synthetic_image(32, 32, seed=1).astype(np.float32) / 255
    hr[:] = np.nan
    manifest = DatasetManifest.from_arrays([np.zeros((16, 16, 3), np.float32)], [hr], 2)
    trainer = Trainer(build_pan(TINY, seed=3), manifest, small_train())
    with pytest.raises(NonFiniteError) as info:
        trainer.step()
    assert info.value.batch_indices and info.value.batch_indices[0][0] == 0


def test_loss_drops_within_200_iterations():
    cfg = TrainConfig(batch_size=4, hr_patch=32, total_iters=200, seed=7)
    model = build_pan(ModelConfig(scale=2, nf=16, unf=12, num_blocks=2), seed=7)
    trainer = Trainer(model, fixture_manifest(), cfg)
    list(trainer.run())
    losses = [r.loss for r in trainer.history]
    assert np.mean(losses[-20:]) < losses[0]


def test_evaluation_hook_records_metrics():
    hr = synthetic_image(32, 32, seed=2)
    lr = to_u8(bicubic_resize(hr, Fraction(1, 2)))
    trainer = Trainer(build_pan(TINY, seed=3), fixture_manifest(),
                      small_train(total_iters=4, eval_every=2), eval_pair=(lr, hr))
    list(trainer.run())
    assert [e[0] for e in trainer.eval_history] == [2, 4]
    assert all(math.isfinite(p) and 0 < s <= 1 for _, p, s in trainer.eval_history)


def test_loss_csv_format():
    text = format_loss_csv([LogRow(0, 1e-3, 0.5), LogRow(1, 9.9e-4, 0.25)])
    assert text == "iter,lr,loss\n0,0.001,0.5\n1,0.00099,0.25\n"
