import numpy as np
import pytest
from scipy.special import expit

from pansr import ops
from pansr.analysis import count_params
from pansr.exceptions import ConfigError, ShapeError, StateDictMismatchError, UnsupportedConfigError
from pansr.nn import (
    BLOCK_TYPES,
    PAN,
    SCPA,
    ModelConfig,
    PixelAttention,
    build_pan,
    pa_layer,
    summary,
)
from pansr.tensor import Tensor, backward, no_grad


def conv_params(cin, cout, k, bias):
    return cin * cout * k * k + (cout if bias else 0)


def pan_params_by_hand(scale, nf=40, unf=24, blocks=16):
    """Closed-form parameter count of the default SC-PA network."""
    half = nf // 2
    scpa = (2 * conv_params(nf, half, 1, False) + conv_params(half, half, 1, True)
            + 3 * conv_params(half, half, 3, False) + conv_params(nf, nf, 1, False))

    def upa(cin):
        return (conv_params(cin, unf, 3, True) + conv_params(unf, unf, 1, True)
                + conv_params(unf, unf, 3, True))

    ups = upa(nf) + (upa(unf) if scale == 4 else 0)
    return (conv_params(3, nf, 3, True) + blocks * scpa + conv_params(nf, nf, 3, True)
            + ups + conv_params(unf, 3, 3, True))


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_param_count_matches_closed_form(scale):
    assert count_params(build_pan(scale=scale)) == pan_params_by_hand(scale)


@pytest.mark.parametrize("scale", [2, 3, 4])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_shape(scale, dtype):
    model = build_pan(ModelConfig(scale=scale, nf=8, unf=6, num_blocks=1)).astype(dtype)
    out = model.predict(np.zeros((2, 3, 5, 7), dtype=dtype))
    assert out.shape == (2, 3, 5 * scale, 7 * scale) and out.dtype == dtype


@pytest.mark.parametrize("kind", BLOCK_TYPES)
def test_every_block_type_builds_and_backprops(kind, rng):
    model = build_pan(ModelConfig(scale=2, block_type=kind, nf=8, unf=6, num_blocks=1))
    x = Tensor(rng.uniform(size=(1, 3, 6, 6)).astype(np.float32))
    backward(ops.mean_all(model(x)))
    assert all(p.grad is not None for p in model.parameters())


def test_zero_blocks_is_allowed():
    model = build_pan(ModelConfig(scale=2, nf=8, unf=6, num_blocks=0))
    assert len(model.body) == 0
    assert model.predict(np.zeros((1, 3, 4, 4))).shape == (1, 3, 8, 8)


def test_pixel_attention_is_sigmoid_gate(rng):
    pa = PixelAttention(4)
    pa.conv.weight.data = rng.standard_normal((4, 4, 1, 1)).astype(np.float32)
    pa.conv.bias.data = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
    x = rng.standard_normal((1, 4, 3, 3)).astype(np.float32)
    with no_grad():
        out = pa(Tensor(x)).data
    w, b = pa.conv.weight.data[:, :, 0, 0], pa.conv.bias.data.ravel()
    gate = expit(np.einsum("oc,nchw->nohw", w, x) + b[None, :, None, None])
    np.testing.assert_allclose(out, x * gate, rtol=1e-5, atol=1e-6)
    fn = pa_layer(Tensor(x), pa.conv.weight, pa.conv.bias).data
    np.testing.assert_allclose(fn, out, rtol=1e-6)


def test_scpa_without_pa_loses_only_the_attention_conv():
    cfg = ModelConfig()
    with_pa, without = SCPA(40, True, cfg), SCPA(40, False, cfg)
    diff = sum(p.data.size for p in with_pa.parameters()) - sum(p.data.size for p in without.parameters())
    assert diff == 20 * 20 + 20


def test_scpa_is_identity_when_fuse_is_zero(rng):
    block = SCPA(8, True, ModelConfig(nf=8))
    from pansr.nn import init_parameters
    init_parameters(block, 0)
    block.fuse.weight.data[:] = 0
    x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
    with no_grad():
        np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_bias_policy_changes_counts():
    base = count_params(build_pan(scale=4))
    off = count_params(build_pan(ModelConfig(scale=4, bias_policy={"fe": False})))
    assert base - off == 40


def test_config_validation():
    with pytest.raises(UnsupportedConfigError, match="unsupported scale"):
        ModelConfig(scale=5).validate()
    with pytest.raises(ConfigError):
        ModelConfig(block_type="nope").validate()
    with pytest.raises(ConfigError):
        ModelConfig(nf=7).validate()
    with pytest.raises(UnsupportedConfigError):
        ModelConfig(block_type="RB_SA", sa_kernel=4).validate()
    assert ModelConfig(block_type="rb-pa").block_type == "RB_PA"
    assert ModelConfig(block_type="RB").num_blocks == 8
    assert ModelConfig().num_blocks == 16


def test_config_dict_round_trip():
    cfg = ModelConfig(scale=3, block_type="RB_CA", nf=16, bias_policy={"last": False})
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_input_channel_check():
    model = build_pan(ModelConfig(scale=2, nf=8, unf=6, num_blocks=0))
    with pytest.raises(ShapeError):
        model.predict(np.zeros((1, 1, 4, 4)))


def test_state_dict_round_trip_and_mismatch():
    a = build_pan(ModelConfig(scale=2, nf=8, unf=6, num_blocks=1), seed=1)
    b = build_pan(ModelConfig(scale=2, nf=8, unf=6, num_blocks=1), seed=2)
    b.load_state_dict(a.state_dict())
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)

    wider = build_pan(ModelConfig(scale=2, nf=10, unf=6, num_blocks=2))
    with pytest.raises(StateDictMismatchError) as info:
        wider.load_state_dict(a.state_dict())
    err = info.value
    assert err.missing and err.shape_mismatch and not err.unexpected
    text = err.describe()
    assert "missing in checkpoint: body.1." in text and "fe.weight" in text


def test_seeded_init_is_deterministic():
    a = build_pan(seed=5).state_dict()
    b = build_pan(seed=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_pan(seed=6).state_dict()
    assert not np.array_equal(a["fe.weight"], c["fe.weight"])


def test_init_statistics():
    model = build_pan(seed=0)
    w = model.trunk.weight.data
    fan_in = 40 * 9
    std = np.sqrt(2.0 / (1 + 0.2 ** 2)) / np.sqrt(fan_in)
    assert abs(w.std() / std - 1) < 0.05
    assert np.all(model.fe.bias.data == 0)
    # the last conv starts small so the bilinear skip dominates early training
    assert model.last.weight.data.std() < 0.2 * np.sqrt(2.0 / (1 + 0.04) / (24 * 9))


def test_summary_lists_every_conv_and_total():
    model = build_pan(scale=4)
    text = summary(model).splitlines()
    n_convs = sum(1 for n, _ in model.named_modules() if type(_).__name__ == "Conv2d")
    assert len(text) == n_convs + 1
    assert text[-1].split()[-1] == "272419"
    assert text[0].split()[0] == "fe"


def test_module_repr_of_paths():
    model = PAN(ModelConfig(scale=2, nf=8, unf=6, num_blocks=1))
    names = [n for n, _ in model.named_parameters()]
    assert names[0] == "fe.weight" and "body.0.pa_conv.att.weight" in names
