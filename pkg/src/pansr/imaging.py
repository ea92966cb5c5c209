"""Color conversion, Y-channel PSNR/SSIM, resamplers and image file I/O.

Images are ``(H, W, 3)`` RGB or ``(H, W)`` luma arrays, either ``uint8`` or
floats in ``[0, 1]``. :class:`ImageBuffer` wraps an array with its color tag
where the distinction matters (I/O, explicit conversions).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .exceptions import DataError, ShapeError, UnsupportedConfigError
from .ops import bilinear_weights
from .utils import atomic_write_bytes

DOWNSCALE_FACTORS = (Fraction(1, 2), Fraction(1, 3), Fraction(1, 4))
UPSCALE_FACTORS = (Fraction(2), Fraction(3), Fraction(4))

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ImageBuffer:
    pixels: np.ndarray
    color: str = "RGB"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if self.color == "RGB" and (px.ndim != 3 or px.shape[2] != 3):
            raise ShapeError(f"RGB buffer needs (H, W, 3) pixels, got {px.shape}")
        if self.color == "Y" and px.ndim != 2:
            raise ShapeError(f"Y buffer needs (H, W) pixels, got {px.shape}")
        if self.color not in ("RGB", "Y"):
            raise ValueError(f"unknown color space {self.color!r}")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return 3 if self.color == "RGB" else 1

    @property
    def depth(self):
        return "u8" if self.pixels.dtype == np.uint8 else "f32"

    def to_float(self) -> "ImageBuffer":
        return ImageBuffer(to_float(self.pixels), self.color)

    def to_u8(self) -> "ImageBuffer":
        return ImageBuffer(to_u8(self.pixels), self.color)


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)


def to_float(img, dtype=np.float64) -> np.ndarray:
    """uint8 -> [0, 1] floats; float input is passed through (cast only)."""
    px = _pixels(img)
    if px.dtype == np.uint8:
        return px.astype(dtype) / 255.0
    return px.astype(dtype, copy=False)


def to_u8(img) -> np.ndarray:
    """Clamp to [0, 1] and round to 8-bit."""
    px = _pixels(img)
    if px.dtype == np.uint8:
        return px
    return np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img) -> np.ndarray:
    """Round-trip through 8 bits, returning floats."""
    return to_u8(img).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# color


def rgb_to_y(img):
    """BT.601 studio-swing luma in unit range: (16 + 65.481R + 128.553G + 24.966B) / 255."""
    if isinstance(img, ImageBuffer):
        if img.color != "RGB":
            raise ShapeError("rgb_to_y needs an RGB image")
        return ImageBuffer(rgb_to_y(img.pixels), "Y")
    px = np.asarray(img)
    if px.ndim != 3 or px.shape[-1] != 3:
        raise ShapeError(f"rgb_to_y needs (H, W, 3) input, got {px.shape}")
    rgb = to_float(px)
    y = 16.0 + 65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]
    return y / 255.0


def _luma(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return to_float(img.pixels) if img.color == "Y" else rgb_to_y(img.pixels)
    px = np.asarray(img)
    return rgb_to_y(px) if px.ndim == 3 else to_float(px)


def _shave(a: np.ndarray, shave: int) -> np.ndarray:
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if 2 * shave >= a.shape[0] or 2 * shave >= a.shape[1]:
        raise ShapeError(f"shave {shave} leaves nothing of a {a.shape[:2]} image")
    return a[shave : a.shape[0] - shave, shave : a.shape[1] - shave] if shave else a


# --------------------------------------------------------------------------
# metrics


def psnr(a, b, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; ``inf`` for identical inputs."""
    x, y = to_float(a), to_float(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: dimension mismatch {x.shape} vs {y.shape}")
    x, y = _shave(x, shave), _shave(y, shave)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim(a, b, shave: int = 0, *, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of two single-channel images."""
    x, y = to_float(a), to_float(b)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("ssim needs single-channel (H, W) inputs")
    if x.shape != y.shape:
        raise ShapeError(f"ssim: dimension mismatch {x.shape} vs {y.shape}")
    x, y = _shave(x, shave), _shave(y, shave)
    if min(x.shape) < window:
        raise ShapeError(f"ssim: image {x.shape} smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_window(window, sigma)
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def evaluate_pair(sr, hr, shave: int) -> tuple[float, float]:
    """Y-channel (PSNR, SSIM) after cropping ``shave`` border pixels."""
    y_sr, y_hr = _luma(sr), _luma(hr)
    return psnr(y_sr, y_hr, shave), ssim(y_sr, y_hr, shave)


# --------------------------------------------------------------------------
# resampling


def cubic_kernel(x, a: float = -0.5):
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _as_factor(factor) -> Fraction:
    f = Fraction(factor).limit_denominator(16)
    if f not in DOWNSCALE_FACTORS + UPSCALE_FACTORS:
        raise UnsupportedConfigError(f"unsupported resize factor {factor}")
    return f


@lru_cache(maxsize=64)
def bicubic_weights(in_size: int, factor: Fraction, antialias: bool = True) -> np.ndarray:
    """Dense (out, in) cubic resampling matrix with half-pixel centers.

    When shrinking with ``antialias`` the kernel is stretched by ``1/factor``
    (and scaled down by ``factor``). Out-of-range taps mirror back into the
    image, edge sample repeated, and each row is normalized to sum to one.
    """
    factor = Fraction(factor)
    out_size = in_size * factor
    if out_size.denominator != 1 or out_size < 1:
        raise ShapeError(f"size {in_size} times {factor} is not a whole number of pixels")
    out_size = int(out_size)
    scale = float(factor)
    width = 4.0
    stretch = scale < 1 and antialias
    if stretch:
        width /= scale
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2.0).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centers[:, None] - idx
    w = scale * cubic_kernel(scale * dist) if stretch else cubic_kernel(dist)
    w /= w.sum(axis=1, keepdims=True)
    period = 2 * in_size
    m = np.mod(idx, period)
    m = np.where(m >= in_size, period - 1 - m, m)
    mat = np.zeros((out_size, in_size))
    np.add.at(mat, (np.repeat(np.arange(out_size), taps), m.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic_resize(img, factor, antialias: bool = True):
    """Separable cubic (a = -0.5) resize of a float or uint8 image.

    Returns floats; ``uint8`` inputs are converted to unit range first.
    """
    is_buffer = isinstance(img, ImageBuffer)
    px = to_float(img)
    f = _as_factor(factor)
    mh = bicubic_weights(px.shape[0], f, antialias)
    mw = bicubic_weights(px.shape[1], f, antialias)
    if px.ndim == 2:
        out = mh @ px @ mw.T
    else:
        out = np.einsum("oh,hwc->owc", mh, px)
        out = np.einsum("pw,owc->opc", mw, out)
    return ImageBuffer(out, img.color) if is_buffer else out


def bilinear_resize(img, factor: int):
    """Half-pixel-center bilinear upscale, the same sampling the model's skip path uses."""
    px = to_float(img)
    mh = bilinear_weights(px.shape[0], factor, np.float64)
    mw = bilinear_weights(px.shape[1], factor, np.float64)
    if px.ndim == 2:
        return mh @ px @ mw.T
    out = np.einsum("oh,hwc->owc", mh, px)
    return np.einsum("pw,owc->opc", mw, out)


# --------------------------------------------------------------------------
# file formats


def read_png(path) -> ImageBuffer:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return ImageBuffer(arr.copy(), "RGB")


def encode_png(img) -> bytes:
    px = to_u8(_pixels(img))
    buf = io.BytesIO()
    Image.fromarray(px, mode="L" if px.ndim == 2 else "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img):
    atomic_write_bytes(path, encode_png(img))


def write_raw(path, img):
    """Header (width, height, channels) as little-endian u32, then f32 pixels."""
    px = to_float(_pixels(img), np.float32)
    h, w = px.shape[:2]
    c = 1 if px.ndim == 2 else px.shape[2]
    header = struct.pack("<3I", w, h, c)
    atomic_write_bytes(path, header + px.astype("<f4").tobytes())


def read_raw(path) -> ImageBuffer:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise DataError(f"{path}: truncated raw header")
    w, h, c = struct.unpack("<3I", data[:12])
    if c not in (1, 3):
        raise DataError(f"{path}: unsupported channel count {c}")
    expected = 12 + 4 * w * h * c
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
    px = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float32)
    if c == 1:
        return ImageBuffer(px.reshape(h, w), "Y")
    return ImageBuffer(px.reshape(h, w, 3), "RGB")
