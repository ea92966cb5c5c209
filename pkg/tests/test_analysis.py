from fractions import Fraction

import numpy as np
import pytest

from pansr import ops
from pansr.analysis import (
    REPORTED_PA_PLACEMENT,
    cost_report,
    count_mult_adds,
    count_params,
    emit_reproduction_ledger,
    format_giga,
    cost_tables,
)
from pansr.exceptions import ShapeError
from pansr.nn import BLOCK_TYPES, PAN, ModelConfig
from pansr.tensor import Tensor, no_grad


def macs_by_hand_x4(w=1280, h=720):
    """Per-output-pixel MAC counts at each grid of the default x4 network."""
    lr = (w // 4) * (h // 4)
    per_lr = 3 * 40 * 9 + 16 * (2 * 40 * 20 + 20 * 20 + 3 * 20 * 20 * 9 + 40 * 40) + 40 * 40 * 9
    per_x2 = 40 * 24 * 9 + 24 * 24 + 24 * 24 * 9
    per_x4 = 24 * 24 * 9 + 24 * 24 + 24 * 24 * 9 + 24 * 3 * 9
    return per_lr * lr + per_x2 * 4 * lr + per_x4 * 16 * lr


def test_x4_macs_match_closed_form():
    assert count_mult_adds(PAN(ModelConfig(scale=4))) == macs_by_hand_x4() == 28_163_635_200


@pytest.mark.parametrize("kind", BLOCK_TYPES)
@pytest.mark.parametrize("scale", [2, 3, 4])
def test_analytic_macs_equal_instrumented_forward(kind, scale):
    """Walking shapes and actually running the convs must count the same MACs."""
    cfg = ModelConfig(scale=scale, block_type=kind, nf=8, unf=6, num_blocks=2)
    model = PAN(cfg)
    h, w = 5, 7
    with no_grad(), ops.count_macs() as rows:
        model(Tensor(np.zeros((2, 3, h, w), dtype=np.float32)))
    report = cost_report(model, (w * scale, h * scale))
    assert sum(m for _, m in rows) == report.total_mult_adds
    ran = dict(rows)
    assert len(ran) == len(rows)
    assert ran == {r.layer: r.mult_adds for r in report.rows if r.mult_adds}


def test_params_in_report_equal_model_params():
    for scale in (2, 3, 4):
        m = PAN(ModelConfig(scale=scale))
        assert cost_report(m).total_params == count_params(m)


def test_x3_at_720p_uses_fractional_lr_grid():
    report = cost_report(PAN(ModelConfig(scale=3)))
    assert report.rows[0].out_shape[2] == Fraction(1280, 3)
    assert isinstance(report.total_mult_adds, int)
    assert "1280/3" in report.to_csv()


def test_indivisible_resolution_is_rejected():
    with pytest.raises(ShapeError):
        cost_report(PAN(ModelConfig(scale=3)), (1279, 719))
    with pytest.raises(ShapeError):
        cost_report(PAN(ModelConfig(scale=2)), (0, 720))


def test_csv_format():
    text = cost_report(PAN(ModelConfig(scale=2, num_blocks=1))).to_csv()
    lines = text.split("\n")
    assert lines[0] == "layer,out_shape,params,mult_adds"
    assert lines[1].startswith("fe,40x360x640,1120,")
    assert "\r" not in text and text.endswith("\n")


def test_summary_text():
    s = cost_report(PAN(ModelConfig(scale=4))).summary()
    assert "params: 272419" in s and "mult-adds: 28163635200 (28.16G)" in s
    assert format_giga(70_518_988_800) == "70.52G"


def test_cost_tables_cover_every_comparison():
    rows = cost_tables()
    assert set(rows) == {"block_ablation", "block_deltas", "pa_placement", "scale_costs"}
    t3 = {(bool(r[0]), bool(r[1])): r[2] for r in rows["pa_placement"][1]}
    assert t3 == REPORTED_PA_PLACEMENT


def test_ledger_is_bytewise_stable(tmp_path):
    a = emit_reproduction_ledger(tmp_path / "a")
    b = emit_reproduction_ledger(tmp_path / "b")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    assert {p.name for p in a.values()} >= {"block_ablation.csv", "pan_x4_layers.csv"}
