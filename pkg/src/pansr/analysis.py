"""Analytic parameter and Mult-Adds accounting.

Nothing here executes the network. Costs come from walking the model's
structure on symbolic shapes: every convolution contributes
``out_c * in_c * k * k`` multiply-accumulates per output pixel at the grid it
runs on. Bias adds, activations, attention products and resizes count zero.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .exceptions import ShapeError
from .nn import PAN, CostRow, ModelConfig
from .utils import atomic_write_text

HD_720P = (1280, 720)

# reported values the ledger is compared against
REPORTED_BLOCK_ABLATION = {
    "RB": (272_009, 28.16e9),
    "RB_CA": (285_379, 28.16e9),
    "RB_SA": (272_427, 28.18e9),
    "RB_PA": (285_219, 28.90e9),
}
REPORTED_BLOCK_DELTAS = {"RB": 0, "RB_PA": 13_210, "SCPA": 410}
REPORTED_PA_PLACEMENT = {
    (False, False): 264_499,
    (True, False): 271_219,
    (False, True): 265_699,
    (True, True): 272_419,
}
REPORTED_SCALE_COSTS = {
    2: (261_000, 70.5e9),
    3: (261_000, 39.0e9),
    4: (272_000, 28.2e9),
}


def _fmt_dim(d):
    d = Fraction(d)
    return str(d.numerator) if d.denominator == 1 else f"{d.numerator}/{d.denominator}"


def format_shape(shape) -> str:
    return "x".join(_fmt_dim(d) for d in shape)


@dataclass
class CostReport:
    rows: list[CostRow]
    hr_resolution: tuple  # (width, height)
    model_name: str = ""
    total_params: int = field(init=False)
    total_mult_adds: int = field(init=False)

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        self.total_mult_adds = sum(r.mult_adds for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "out_shape", "params", "mult_adds"])
        for r in self.rows:
            writer.writerow([r.layer, format_shape(r.out_shape), r.params, r.mult_adds])
        return buf.getvalue()

    def summary(self) -> str:
        w, h = self.hr_resolution
        return (
            f"model: {self.model_name}\n"
            f"hr_resolution: {w}x{h}\n"
            f"params: {self.total_params}\n"
            f"mult-adds: {self.total_mult_adds} ({format_giga(self.total_mult_adds)})"
        )


def format_giga(n) -> str:
    return f"{n / 1e9:.2f}G"


def count_params(model) -> int:
    return sum(p.data.size for p in model.parameters())


def cost_report(model: PAN, hr_resolution=HD_720P) -> CostReport:
    """Per-layer costs with the network producing a ``width x height`` output."""
    width, height = hr_resolution
    s = model.scale
    if width <= 0 or height <= 0:
        raise ShapeError(f"invalid HR resolution {width}x{height}")
    lr = (model.config.in_channels, Fraction(height, s), Fraction(width, s))
    if (lr[1] * lr[2]).denominator != 1:
        raise ShapeError(
            f"HR resolution {width}x{height} is not divisible by scale {s}"
        )
    rows: list[CostRow] = []
    model.analyze(lr, rows)
    name = f"PAN-{model.config.block_type} x{s}"
    return CostReport(rows, (width, height), name)


def count_mult_adds(model: PAN, hr_resolution=HD_720P) -> int:
    return cost_report(model, hr_resolution).total_mult_adds


def _variant(**kw) -> PAN:
    # weights are irrelevant to counting; skip random init cost
    return PAN(ModelConfig(**kw))


def _rel(a, b):
    return (a - b) / b if b else 0.0


def cost_tables():
    """Reproduced vs reported numbers for each efficiency table."""
    t1 = []
    for kind, (r_params, r_macs) in REPORTED_BLOCK_ABLATION.items():
        m = _variant(scale=4, block_type=kind)
        params, macs = count_params(m), count_mult_adds(m)
        t1.append([kind, params, macs, r_params, int(r_macs),
                   f"{_rel(params, r_params):+.4f}", f"{_rel(macs, r_macs):+.4f}"])

    rb = count_params(_variant(scale=4, block_type="RB"))
    t2 = []
    for kind, reported_diff in REPORTED_BLOCK_DELTAS.items():
        diff = count_params(_variant(scale=4, block_type=kind)) - rb
        t2.append([kind, diff, reported_diff])

    t3 = []
    for (pa_blocks, pa_up), reported in REPORTED_PA_PLACEMENT.items():
        m = _variant(scale=4, pa_in_blocks=pa_blocks, pa_in_upsampler=pa_up)
        t3.append([int(pa_blocks), int(pa_up), count_params(m), reported])

    t5 = []
    for scale, (r_params, r_macs) in REPORTED_SCALE_COSTS.items():
        m = _variant(scale=scale)
        params, macs = count_params(m), count_mult_adds(m)
        t5.append([scale, params, macs, r_params, int(r_macs),
                   f"{_rel(macs, r_macs):+.4f}"])
    return {
        "block_ablation": (["variant", "params", "mult_adds", "reported_params",
                    "reported_mult_adds", "params_rel_err", "mult_adds_rel_err"], t1),
        "block_deltas": (["unit", "params_diff", "reported_params_diff"], t2),
        "pa_placement": (["pa_in_scpa", "pa_in_upa", "params", "reported_params"], t3),
        "scale_costs": (["scale", "params", "mult_adds", "reported_params",
                    "reported_mult_adds", "mult_adds_rel_err"], t5),
    }


def emit_reproduction_ledger(out_dir) -> dict[str, Path]:
    """Write one CSV per efficiency table plus per-model layer ledgers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, (header, rows) in cost_tables().items():
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        path = out_dir / f"{name}.csv"
        atomic_write_text(path, buf.getvalue())
        written[name] = path
    for scale in (2, 3, 4):
        report = cost_report(_variant(scale=scale))
        path = out_dir / f"pan_x{scale}_layers.csv"
        atomic_write_text(path, report.to_csv())
        written[f"pan_x{scale}_layers"] = path
    return written


__all__ = [
    "CostReport",
    "count_mult_adds",
    "count_params",
    "cost_report",
    "emit_reproduction_ledger",
    "format_giga",
    "cost_tables",
]
