"""Central finite-difference check of a whole model's parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ModelConfig, build_pan
from .ops import record_kinks
from .tensor import Tensor, backward, no_grad
from .training import l1_loss

# thresholds on the max relative error
F32_TOLERANCE = 1e-2
F64_TOLERANCE = 1e-5
# finite-difference step per precision
F32_STEP = 3e-3
F64_STEP = 1e-6


def tiny_config(block_type="SCPA", width=8, blocks=2, scale=2, **kw) -> ModelConfig:
    """The small model used for gradient checks: nf=width, unf=3/4 width."""
    unf = kw.pop("unf", max(2, (3 * width) // 4))
    return ModelConfig(scale=scale, block_type=block_type, num_blocks=blocks, nf=width,
                       unf=unf, last_gain=1.0, **kw)


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: str
    checked: int
    tolerance: float
    dtype: str
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck_model(config: ModelConfig, seed: int = 0, dtype=np.float64,
                    samples: int = 200, lr_size: int = 6, step: float | None = None,
                    tolerance: float | None = None) -> GradcheckResult:
    """Compare backprop gradients of an L1 loss with central differences.

    Up to ``samples`` parameter elements are drawn by cycling through the
    parameter tensors in a shuffled order, one random element per visit, so
    small tensors (biases, attention convs) are always covered. Probes whose
    +step and -step evaluations select different branches of any leaky ReLU,
    channel max or L1 sign are redrawn, since the difference quotient is not
    a derivative estimate there. The relative error floor is 1% of the
    largest sampled gradient magnitude, so elements whose true gradient sits
    below the working precision's difference noise do not dominate the ratio.
    """
    dtype = np.dtype(dtype)
    is64 = dtype == np.float64
    step = step if step is not None else (F64_STEP if is64 else F32_STEP)
    tolerance = tolerance if tolerance is not None else (F64_TOLERANCE if is64 else F32_TOLERANCE)
    rng = np.random.default_rng(seed)
    model = build_pan(config, seed=seed).astype(dtype)
    # random biases so no bias sits at a symmetric zero
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(dtype)
    s = config.scale
    x = Tensor(rng.uniform(0, 1, (1, config.in_channels, lr_size, lr_size)).astype(dtype))
    y = Tensor(rng.uniform(0, 1, (1, config.out_channels, s * lr_size, s * lr_size)).astype(dtype))

    loss = l1_loss(model(x), y)
    backward(loss)
    params = list(model.named_parameters())
    analytic = {name: p.grad.copy() for name, p in params}

    total = sum(p.data.size for _, p in params)
    samples = min(samples, total)
    target = y.data.astype(np.float64)

    def loss_value():
        # forward runs in the working precision; only the final mean is taken in f64
        with no_grad(), record_kinks() as masks:
            pred = model(x).data.astype(np.float64)
        masks.append(pred > target)
        return float(np.mean(np.abs(pred - target))), masks

    def candidates():
        if samples == total:
            for name, p in params:
                for idx in range(p.data.size):
                    yield name, p, idx
            return
        while True:
            for i in rng.permutation(len(params)):
                name, p = params[i]
                yield name, p, int(rng.integers(p.data.size))

    checked = []
    crossed = 0
    h = dtype.type(step)
    for name, p, idx in candidates():
        if len(checked) >= samples or crossed > 10 * samples:
            break
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up, up_masks = loss_value()
        flat[idx] = orig - h
        down, down_masks = loss_value()
        flat[idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(up_masks, down_masks)):
            # the two probes straddle a kink; the difference quotient is meaningless there
            crossed += 1
            continue
        # divide by the step actually taken after rounding to the working precision
        taken = float(dtype.type(orig + h)) - float(dtype.type(orig - h))
        analytic_value = float(analytic[name].reshape(-1)[idx])
        checked.append((f"{name}[{idx}]", analytic_value, (up - down) / taken))

    floor = 1e-2 * max((abs(a) for _, a, _ in checked), default=1.0)
    worst, worst_err = "", 0.0
    for label, a, n in checked:
        err = relative_error(a, n, floor)
        if err > worst_err:
            worst, worst_err = f"{label} analytic={a:.6g} numeric={n:.6g}", err
    model.zero_grad()
    return GradcheckResult(worst_err, worst, len(checked), tolerance, dtype.name, crossed)


def gradcheck_all_blocks(dtype=np.float64, seed=0, width=8, blocks=2, samples=200):
    """Run :func:`gradcheck_model` for every block type at tiny width."""
    from .nn import BLOCK_TYPES

    results = {}
    for kind in BLOCK_TYPES:
        cfg = tiny_config(kind, width=width, blocks=blocks)
        results[kind] = gradcheck_model(cfg, seed=seed, dtype=dtype, samples=samples)
    return results
