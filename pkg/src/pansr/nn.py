"""Layers, attention variants, residual/SC-PA/U-PA blocks and the PAN model.

Every module can run forward on a :class:`~pansr.tensor.Tensor` and can also
describe itself analytically through ``analyze``, which walks the same
structure on symbolic ``(c, h, w)`` shapes and emits per-conv cost rows.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import ops
from .exceptions import ConfigError, ShapeError, UnsupportedConfigError
from .tensor import Tensor, no_grad

BLOCK_TYPES = ("SCPA", "RB", "RB_CA", "RB_SA", "RB_PA")
SCALES = (2, 3, 4)

DEFAULT_BIAS_POLICY = {
    "fe": True,
    "trunk": True,
    "upsample": True,
    "hr": True,
    "last": True,
    "pa": True,
    "split": False,
    "fuse": False,
    "branch": False,
    "rb": False,
    "ca": True,
    "sa": True,
}


@dataclass
class CostRow:
    layer: str
    out_shape: tuple
    params: int
    mult_adds: int


class Module:
    """Minimal container that tracks parameters and submodules in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "path", "")

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
            self._modules.pop(name, None)
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def assign_paths(self):
        for name, mod in self.named_modules():
            object.__setattr__(mod, "path", name)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        from .exceptions import StateDictMismatchError

        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        shapes = [
            (n, tuple(state[n].shape), own[n].shape)
            for n in own
            if n in state and tuple(state[n].shape) != own[n].shape
        ]
        if missing or unexpected or shapes:
            raise StateDictMismatchError(missing, unexpected, shapes)
        for n, p in own.items():
            p.data = np.array(state[n], dtype=p.dtype, copy=True)
        return self

    def astype(self, dtype):
        """Cast every parameter in place (float64 for tight gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def analyze(self, shape, rows):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self._order = []
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
            self._order.append(m)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]

    def forward(self, x):
        for m in self._order:
            x = m(x)
        return x

    def analyze(self, shape, rows):
        for m in self._order:
            shape = m.analyze(shape, rows)
        return shape


class Conv2d(Module):
    """Same-padding convolution; weight (out, in, k, k), bias (1, out, 1, 1)."""

    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True,
                 init="kaiming", gain=1.0, negative_slope=0.2):
        super().__init__()
        if kernel_size not in ops.SUPPORTED_KERNELS:
            raise UnsupportedConfigError(f"unsupported kernel size {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.init_scheme = init
        self.gain = gain
        self.negative_slope = negative_slope
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size), np.float32),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros((1, out_channels, 1, 1), np.float32), requires_grad=True)
            if bias else None
        )

    def reset_parameters(self, rng: np.random.Generator):
        fan_in = self.in_channels * self.kernel_size ** 2
        if self.init_scheme == "zeros":
            std = 0.0
        else:
            std = np.sqrt(2.0 / (1.0 + self.negative_slope ** 2)) / np.sqrt(fan_in)
        w = rng.standard_normal(self.weight.shape) * (std * self.gain)
        self.weight.data = w.astype(self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, label=self.path)

    def num_params(self):
        return self.weight.data.size + (self.bias.data.size if self.bias is not None else 0)

    def analyze(self, shape, rows):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"{self.path}: expects {self.in_channels} channels, got {c}")
        macs = self.out_channels * self.in_channels * self.kernel_size ** 2 * h * w
        if Fraction(macs).denominator != 1:
            raise ShapeError(f"{self.path}: resolution gives fractional pixel count")
        out = (self.out_channels, h, w)
        rows.append(CostRow(self.path, out, self.num_params(), int(macs)))
        return out


class LeakyReLU(Module):
    def __init__(self, negative_slope=0.2):
        super().__init__()
        self.negative_slope = negative_slope

    def forward(self, x):
        return ops.leaky_relu(x, self.negative_slope)

    def analyze(self, shape, rows):
        return shape


class Identity(Module):
    def forward(self, x):
        return x

    def analyze(self, shape, rows):
        return shape


class PixelAttention(Module):
    """x * sigmoid(conv1x1(x)) with a full (c, h, w) attention map."""

    def __init__(self, channels, bias=True):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, bias=bias)

    def attention(self, x):
        return ops.sigmoid(self.conv(x))

    def forward(self, x):
        return ops.elementwise_mul(self.attention(x), x)

    def analyze(self, shape, rows):
        self.conv.analyze(shape, rows)
        return shape


class ChannelAttention(Module):
    """Squeeze-excitation gate: GAP, bottleneck 1x1 convs, sigmoid, per-channel scale."""

    def __init__(self, channels, reduction=2, bias=True):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        self.squeeze = Conv2d(channels, channels // reduction, 1, bias=bias)
        self.excite = Conv2d(channels // reduction, channels, 1, bias=bias)

    def attention(self, x):
        s = ops.global_avg_pool(x)
        s = ops.leaky_relu(self.squeeze(s), 0.0)
        return ops.sigmoid(self.excite(s))

    def forward(self, x):
        return ops.channel_scale(x, self.attention(x))

    def analyze(self, shape, rows):
        c = shape[0]
        # runs on the pooled 1x1 grid
        self.squeeze.analyze((c, 1, 1), rows)
        self.excite.analyze((self.squeeze.out_channels, 1, 1), rows)
        return shape


class SpatialAttention(Module):
    """CBAM-style gate: channel mean/max stack, kxk conv to one map, sigmoid."""

    def __init__(self, kernel_size=7, bias=True):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, bias=bias)

    def attention(self, x):
        return ops.sigmoid(self.conv(ops.channel_stat_pool(x)))

    def forward(self, x):
        return ops.spatial_scale(x, self.attention(x))

    def analyze(self, shape, rows):
        _, h, w = shape
        self.conv.analyze((2, h, w), rows)
        return shape


def make_attention(kind, channels, config: "ModelConfig"):
    bias = config.bias_policy
    if kind in (None, "none"):
        return Identity()
    if kind == "CA":
        return ChannelAttention(channels, config.ca_reduction, bias=bias["ca"])
    if kind == "SA":
        return SpatialAttention(config.sa_kernel, bias=bias["sa"])
    if kind == "PA":
        return PixelAttention(channels, bias=bias["pa"])
    raise ConfigError(f"unknown attention kind {kind!r}")


class ResidualBlock(Module):
    """conv3x3 -> act -> conv3x3 -> attention -> + x."""

    def __init__(self, channels, attention=None, config: "ModelConfig" = None):
        super().__init__()
        config = config or ModelConfig()
        b = config.bias_policy["rb"]
        self.conv1 = Conv2d(channels, channels, 3, bias=b)
        self.act = LeakyReLU(config.negative_slope)
        self.conv2 = Conv2d(channels, channels, 3, bias=b)
        self.attn = make_attention(attention, channels, config)

    def forward(self, x):
        y = self.conv2(self.act(self.conv1(x)))
        return ops.elementwise_add(x, self.attn(y))

    def analyze(self, shape, rows):
        s = self.conv2.analyze(self.conv1.analyze(shape, rows), rows)
        self.attn.analyze(s, rows)
        return shape


class PAConv(Module):
    """conv3x3(x) gated by sigmoid(conv1x1(x)); plain conv3x3 when PA is disabled."""

    def __init__(self, channels, use_pa=True, config: "ModelConfig" = None):
        super().__init__()
        config = config or ModelConfig()
        self.use_pa = use_pa
        if use_pa:
            self.att = Conv2d(channels, channels, 1, bias=config.bias_policy["pa"])
        self.conv = Conv2d(channels, channels, 3, bias=config.bias_policy["branch"])

    def forward(self, x):
        y = self.conv(x)
        if self.use_pa:
            y = ops.elementwise_mul(y, ops.sigmoid(self.att(x)))
        return y

    def analyze(self, shape, rows):
        if self.use_pa:
            self.att.analyze(shape, rows)
        return self.conv.analyze(shape, rows)


class SCPA(Module):
    """Two-branch self-calibrated block with pixel attention in the upper branch."""

    def __init__(self, channels, use_pa=True, config: "ModelConfig" = None):
        super().__init__()
        config = config or ModelConfig()
        if channels % 2:
            raise ConfigError(f"SC-PA needs an even width, got {channels}")
        half = channels // 2
        bias = config.bias_policy
        self.split_a = Conv2d(channels, half, 1, bias=bias["split"])
        self.split_b = Conv2d(channels, half, 1, bias=bias["split"])
        self.pa_conv = PAConv(half, use_pa, config)
        self.conv_a = Conv2d(half, half, 3, bias=bias["branch"])
        self.conv_b = Conv2d(half, half, 3, bias=bias["branch"])
        self.fuse = Conv2d(channels, channels, 1, bias=bias["fuse"])
        self.act = LeakyReLU(config.negative_slope)

    def forward(self, x):
        a = self.act(self.split_a(x))
        a = self.act(self.conv_a(self.pa_conv(a)))
        b = self.act(self.split_b(x))
        b = self.act(self.conv_b(b))
        y = self.fuse(ops.concat_channels(a, b))
        return ops.elementwise_add(x, y)

    def analyze(self, shape, rows):
        sa = self.split_a.analyze(shape, rows)
        sb = self.split_b.analyze(shape, rows)
        self.conv_a.analyze(self.pa_conv.analyze(sa, rows), rows)
        self.conv_b.analyze(sb, rows)
        _, h, w = shape
        return self.fuse.analyze((shape[0], h, w), rows)


class UPA(Module):
    """Nearest upsample -> conv3x3 -> PA -> act -> conv3x3 -> act."""

    def __init__(self, in_channels, out_channels, factor, use_pa=True,
                 config: "ModelConfig" = None):
        super().__init__()
        config = config or ModelConfig()
        if factor not in ops.NEAREST_FACTORS:
            raise UnsupportedConfigError(f"U-PA: unsupported upsample factor {factor}")
        bias = config.bias_policy
        self.factor = factor
        self.up_conv = Conv2d(in_channels, out_channels, 3, bias=bias["upsample"])
        self.pa = PixelAttention(out_channels, bias=bias["pa"]) if use_pa else Identity()
        self.hr_conv = Conv2d(out_channels, out_channels, 3, bias=bias["hr"])
        self.act = LeakyReLU(config.negative_slope)

    def forward(self, x):
        x = self.up_conv(ops.resize_nearest(x, self.factor))
        x = self.act(self.pa(x))
        return self.act(self.hr_conv(x))

    def analyze(self, shape, rows):
        c, h, w = shape
        s = self.up_conv.analyze((c, h * self.factor, w * self.factor), rows)
        s = self.pa.analyze(s, rows)
        return self.hr_conv.analyze(s, rows)


@dataclass
class ModelConfig:
    """Architecture descriptor for PAN and its ablation variants."""

    scale: int = 4
    block_type: str = "SCPA"
    num_blocks: int | None = None
    nf: int = 40
    unf: int = 24
    in_channels: int = 3
    out_channels: int = 3
    pa_in_blocks: bool = True
    pa_in_upsampler: bool = True
    negative_slope: float = 0.2
    fe_activation: bool = True
    ca_reduction: int = 2
    sa_kernel: int = 7
    last_gain: float = 0.1
    bias_policy: dict = field(default_factory=lambda: dict(DEFAULT_BIAS_POLICY))

    def __post_init__(self):
        self.block_type = str(self.block_type).upper().replace("-", "_")
        if self.num_blocks is None:
            self.num_blocks = 16 if self.block_type == "SCPA" else 8
        policy = dict(DEFAULT_BIAS_POLICY)
        policy.update(self.bias_policy or {})
        self.bias_policy = policy

    def validate(self):
        if self.scale not in SCALES:
            raise UnsupportedConfigError(f"unsupported scale {self.scale}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"unknown block type {self.block_type!r}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.nf < 1 or self.unf < 1:
            raise ConfigError("widths must be positive")
        if self.block_type == "SCPA" and self.nf % 2:
            raise ConfigError(f"SC-PA needs an even trunk width, got nf={self.nf}")
        if self.block_type == "RB_CA" and self.nf % self.ca_reduction:
            raise ConfigError(
                f"nf={self.nf} not divisible by CA reduction {self.ca_reduction}"
            )
        if self.sa_kernel not in ops.SUPPORTED_KERNELS:
            raise UnsupportedConfigError(f"unsupported SA kernel {self.sa_kernel}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class PAN(Module):
    """Feature extraction, stacked blocks, U-PA reconstruction and a bilinear skip."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        bias = config.bias_policy
        nf, unf = config.nf, config.unf
        self.fe = Conv2d(config.in_channels, nf, 3, bias=bias["fe"])
        self.fe_act = LeakyReLU(config.negative_slope) if config.fe_activation else Identity()
        self.body = Sequential(*[self._make_block(config) for _ in range(config.num_blocks)])
        self.trunk = Conv2d(nf, nf, 3, bias=bias["trunk"])
        factors = [2, 2] if config.scale == 4 else [config.scale]
        stages = []
        in_c = nf
        for f in factors:
            stages.append(UPA(in_c, unf, f, config.pa_in_upsampler, config))
            in_c = unf
        self.upsampler = Sequential(*stages)
        self.last = Conv2d(unf, config.out_channels, 3, bias=bias["last"],
                           gain=config.last_gain)
        self.assign_paths()

    @staticmethod
    def _make_block(config):
        if config.block_type == "SCPA":
            return SCPA(config.nf, config.pa_in_blocks, config)
        attention = {"RB": None, "RB_CA": "CA", "RB_SA": "SA", "RB_PA": "PA"}
        return ResidualBlock(config.nf, attention[config.block_type], config)

    @property
    def scale(self):
        return self.config.scale

    def reconstruct(self, x):
        """Everything except the bilinear skip: the learned residual."""
        x = self.fe_act(self.fe(x))
        x = self.trunk(self.body(x))
        return self.last(self.upsampler(x))

    def forward(self, x):
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"PAN expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        return ops.elementwise_add(self.reconstruct(x), ops.resize_bilinear(x, self.scale))

    def analyze(self, shape, rows):
        s = self.fe.analyze(shape, rows)
        s = self.body.analyze(s, rows)
        s = self.trunk.analyze(s, rows)
        s = self.upsampler.analyze(s, rows)
        return self.last.analyze(s, rows)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Run a forward pass on a plain (n, c, h, w) array without recording."""
        with no_grad():
            return self(Tensor(np.asarray(x, dtype=self.dtype))).data


def init_parameters(model: Module, seed=0):
    """Kaiming fan-in normal weights, zero biases, in parameter-name order."""
    rng = np.random.default_rng(seed)
    for _, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            mod.reset_parameters(rng)
    return model


def build_pan(config: ModelConfig | None = None, seed=0, **overrides) -> PAN:
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = dataclasses.replace(config, **overrides)
    model = PAN(config)
    init_parameters(model, seed)
    return model


def summary(model: Module) -> str:
    """One line per conv layer: name, weight shape, parameter count; then the total."""
    convs = [(n, m) for n, m in model.named_modules() if isinstance(m, Conv2d)]
    width = max((len(n) for n, _ in convs), default=5)
    lines = []
    for name, conv in convs:
        shape = "x".join(str(d) for d in conv.weight.shape)
        if conv.bias is not None:
            shape += f"+{conv.out_channels}"
        lines.append(f"{name:<{width}}  {shape:<16} {conv.num_params():>8}")
    total = sum(p.data.size for p in model.parameters())
    lines.append(f"{'total':<{width}}  {'':<16} {total:>8}")
    return "\n".join(lines)


def pa_layer(x: Tensor, conv_weight: Tensor, conv_bias: Tensor | None) -> Tensor:
    """Functional pixel attention: sigmoid(conv1x1(x)) * x."""
    return ops.elementwise_mul(ops.sigmoid(ops.conv2d(x, conv_weight, conv_bias)), x)
