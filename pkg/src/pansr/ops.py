"""Differentiable NCHW operations used by the PAN family.

No op broadcasts: mismatched shapes raise :class:`ShapeError`. Per-channel
and per-pixel gating, which would normally rely on broadcasting, have their
own ops (:func:`channel_scale`, :func:`spatial_scale`).
"""
from __future__ import annotations

import contextlib
import threading
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ShapeError, UnsupportedConfigError
from .tensor import Tensor, check_same_dtype, record

SUPPORTED_KERNELS = (1, 3, 5, 7)
NEAREST_FACTORS = (2, 3)
BILINEAR_FACTORS = (2, 3, 4)


class _MacTally(threading.local):
    def __init__(self):
        self.rows = None


_tally = _MacTally()


class _KinkProbe(threading.local):
    def __init__(self):
        self.masks = None


_kinks = _KinkProbe()


@contextlib.contextmanager
def record_kinks():
    """Collect the branch selections of every non-smooth op run inside the block.

    Yields a list receiving the leaky-ReLU sign masks and the channel-max
    argmax maps; two runs whose lists differ sit on different sides of a kink.
    """
    prev = _kinks.masks
    masks: list = []
    _kinks.masks = masks
    try:
        yield masks
    finally:
        _kinks.masks = prev


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates of every conv executed inside the block.

    Yields a list that receives ``(label, macs)`` per conv call, where
    ``macs`` is per image (batch size divided out).
    """
    prev = _tally.rows
    rows: list = []
    _tally.rows = rows
    try:
        yield rows
    finally:
        _tally.rows = prev


def _require_4d(name, *tensors):
    for t in tensors:
        if not isinstance(t, Tensor):
            raise TypeError(f"{name}: expected Tensor, got {type(t).__name__}")


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    # column order (c, kh, kw): kernel-row-major accumulation per output cell
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, h, w, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h, j : j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None, label: str | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding.

    ``weight`` is stored as a 4-D tensor ``(out_c, in_c, k, k)``; ``bias``
    as ``(1, out_c, 1, 1)``.
    """
    _require_4d("conv2d", input, weight)
    out_c, in_c, kh, kw = weight.shape
    if kh != kw or kh not in SUPPORTED_KERNELS:
        raise UnsupportedConfigError(f"conv2d: unsupported kernel {kh}x{kw}")
    k = kh
    if stride != 1:
        raise UnsupportedConfigError(f"conv2d: unsupported stride {stride}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise UnsupportedConfigError(
            f"conv2d: padding {padding} does not preserve size for k={k}"
        )
    n, c, h, w = input.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_c}")
    tensors = [input, weight]
    if bias is not None:
        _require_4d("conv2d", bias)
        if bias.shape != (1, out_c, 1, 1):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected (1, {out_c}, 1, 1)")
        tensors.append(bias)
    check_same_dtype("conv2d", *tensors)

    if _tally.rows is not None:
        _tally.rows.append((label, out_c * in_c * k * k * h * w))

    x = input.data
    wmat = weight.data.reshape(out_c, in_c * k * k)
    if k == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        cols = _im2col(x, k, padding)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data.reshape(1, out_c)
    out = np.ascontiguousarray(out2.reshape(n, h, w, out_c).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, out_c)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if input.requires_grad:
            gcols = g2 @ wmat
            if k == 1:
                gx = np.ascontiguousarray(gcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                gx = _col2im(gcols, (n, c, h, w), k, padding)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0).reshape(1, out_c, 1, 1)
        return (gx, gw, gb)[: len(tensors)]

    return record("conv2d", out, tensors, backward)


# --------------------------------------------------------------------------
# elementwise


def sigmoid(input: Tensor) -> Tensor:
    _require_4d("sigmoid", input)
    out = expit(input.data)

    def backward(g):
        return (g * out * (1 - out),)

    return record("sigmoid", out, [input], backward)


def leaky_relu(input: Tensor, negative_slope: float = 0.2) -> Tensor:
    _require_4d("leaky_relu", input)
    x = input.data
    pos = x > 0
    if _kinks.masks is not None:
        _kinks.masks.append(pos)
    slope = x.dtype.type(negative_slope)
    out = np.where(pos, x, x * slope)

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return record("leaky_relu", out, [input], backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _require_4d("elementwise_mul", a, b)
    _same_shape("elementwise_mul", a, b)
    check_same_dtype("elementwise_mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return record("mul", ad * bd, [a, b], backward)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _require_4d("elementwise_add", a, b)
    _same_shape("elementwise_add", a, b)
    check_same_dtype("elementwise_add", a, b)

    def backward(g):
        return (g, g)

    return record("add", a.data + b.data, [a, b], backward)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel of ``x`` (n,c,h,w) by ``scale`` (n,c,1,1)."""
    _require_4d("channel_scale", x, scale)
    n, c, _, _ = x.shape
    if scale.shape != (n, c, 1, 1):
        raise ShapeError(f"channel_scale: scale {scale.shape} for input {x.shape}")
    check_same_dtype("channel_scale", x, scale)
    xd, sd = x.data, scale.data
    s_full = np.repeat(np.repeat(sd, x.shape[2], axis=2), x.shape[3], axis=3)

    def backward(g):
        return (g * s_full, (g * xd).sum(axis=(2, 3), keepdims=True))

    return record("channel_scale", xd * s_full, [x, scale], backward)


def spatial_scale(x: Tensor, mask: Tensor) -> Tensor:
    """Multiply every channel of ``x`` (n,c,h,w) by ``mask`` (n,1,h,w)."""
    _require_4d("spatial_scale", x, mask)
    n, c, h, w = x.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(f"spatial_scale: mask {mask.shape} for input {x.shape}")
    check_same_dtype("spatial_scale", x, mask)
    xd = x.data
    m_full = np.repeat(mask.data, c, axis=1)

    def backward(g):
        return (g * m_full, (g * xd).sum(axis=1, keepdims=True))

    return record("spatial_scale", xd * m_full, [x, mask], backward)


# --------------------------------------------------------------------------
# channel plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d("concat_channels", a, b)
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    check_same_dtype("concat_channels", a, b)
    ca = a.shape[1]

    def backward(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return record("concat", np.concatenate([a.data, b.data], axis=1), [a, b], backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d("slice_channels", x)
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}:{stop}) outside {c} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice", np.ascontiguousarray(x.data[:, start:stop]), [x], backward)


# --------------------------------------------------------------------------
# resampling


def resize_nearest(input: Tensor, factor: int) -> Tensor:
    _require_4d("resize_nearest", input)
    if factor not in NEAREST_FACTORS:
        raise UnsupportedConfigError(f"resize_nearest: unsupported factor {factor}")
    n, c, h, w = input.shape
    out = np.repeat(np.repeat(input.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("resize_nearest", out, [input], backward)


@lru_cache(maxsize=64)
def _bilinear_matrix(size: int, factor: int, dtype_str: str) -> np.ndarray:
    out_size = size * factor
    m = np.zeros((out_size, size), dtype=np.float64)
    for o in range(out_size):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def bilinear_weights(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (size*factor, size), half-pixel centers, edge clamp."""
    return _bilinear_matrix(size, factor, np.dtype(dtype).str)


def resize_bilinear(input: Tensor, factor: int) -> Tensor:
    _require_4d("resize_bilinear", input)
    if factor not in BILINEAR_FACTORS:
        raise UnsupportedConfigError(f"resize_bilinear: unsupported factor {factor}")
    n, c, h, w = input.shape
    mh = bilinear_weights(h, factor, input.dtype)
    mw = bilinear_weights(w, factor, input.dtype)
    # contiguous operands keep the matmul summation order independent of memory layout
    out = np.matmul(np.matmul(mh, np.ascontiguousarray(input.data)), np.ascontiguousarray(mw.T))

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return record("resize_bilinear", out, [input], backward)


# --------------------------------------------------------------------------
# pooling and reductions


def global_avg_pool(input: Tensor) -> Tensor:
    _require_4d("global_avg_pool", input)
    n, c, h, w = input.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = input.data.mean(axis=(2, 3), keepdims=True)
    inv = input.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to(g * inv, input.shape).copy(),)

    return record("global_avg_pool", out, [input], backward)


def channel_stat_pool(input: Tensor) -> Tensor:
    """Per-pixel channel mean and max stacked as two channels: (n, 2, h, w)."""
    _require_4d("channel_stat_pool", input)
    n, c, h, w = input.shape
    x = input.data
    arg = x.argmax(axis=1)
    if _kinks.masks is not None:
        _kinks.masks.append(arg)
    mx = np.take_along_axis(x, arg[:, None], axis=1)
    out = np.concatenate([x.mean(axis=1, keepdims=True), mx], axis=1)
    inv = x.dtype.type(1.0 / c)

    def backward(g):
        gx = np.broadcast_to(g[:, :1] * inv, x.shape).copy()
        np.put_along_axis(gx, arg[:, None],
                          np.take_along_axis(gx, arg[:, None], axis=1) + g[:, 1:], axis=1)
        return (gx,)

    return record("channel_stat_pool", out, [input], backward)


def sum_all(input: Tensor) -> Tensor:
    _require_4d("sum_all", input)
    out = input.data.sum(dtype=input.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(input.shape, g.reshape(-1)[0], dtype=input.dtype),)

    return record("sum", out, [input], backward)


def mean_all(input: Tensor) -> Tensor:
    _require_4d("mean_all", input)
    count = input.data.size
    out = input.data.mean(dtype=input.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(input.shape, g.reshape(-1)[0] / count, dtype=input.dtype),)

    return record("mean", out, [input], backward)
