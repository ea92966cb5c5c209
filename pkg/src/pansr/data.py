"""LR generation, dataset manifests and random patch batches."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import DataError
from .imaging import bicubic_resize, encode_png, read_png, to_float, to_u8
from .tensor import Tensor
from .utils import atomic_write_bytes, atomic_write_text, sha256_file

MANIFEST_MAGIC = "# pansr-manifest v1"
MANIFEST_COLUMNS = ("hr_path", "lr_path", "width", "height", "hr_sha256", "lr_sha256")
IMAGE_SUFFIXES = (".png",)


@dataclass(frozen=True)
class ManifestEntry:
    hr_path: str
    lr_path: str
    width: int
    height: int
    hr_sha256: str = ""
    lr_sha256: str = ""


@dataclass
class DatasetManifest:
    """Paired HR/LR images; ``width``/``height`` are HR dimensions."""

    entries: list[ManifestEntry]
    scale: int
    root: Optional[Path] = None
    _cache: Optional[list] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.hr_path, e.lr_path))
        for e in self.entries:
            if e.width % self.scale or e.height % self.scale:
                raise DataError(
                    f"{e.hr_path}: {e.width}x{e.height} not divisible by scale {self.scale}"
                )

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_arrays(cls, lr_images, hr_images, scale: int) -> "DatasetManifest":
        """In-memory manifest; images are (H, W, 3) uint8 or unit-range floats."""
        if len(lr_images) != len(hr_images):
            raise DataError("need the same number of LR and HR images")
        entries, cache = [], []
        for i, (lr, hr) in enumerate(zip(lr_images, hr_images)):
            lr_f, hr_f = to_float(lr, np.float32), to_float(hr, np.float32)
            if hr_f.shape[0] != lr_f.shape[0] * scale or hr_f.shape[1] != lr_f.shape[1] * scale:
                raise DataError(
                    f"pair {i}: HR {hr_f.shape[:2]} is not LR {lr_f.shape[:2]} times {scale}"
                )
            name = f"<memory:{i:06d}>"
            entries.append(ManifestEntry(name, name, hr_f.shape[1], hr_f.shape[0]))
            cache.append((_chw(lr_f), _chw(hr_f)))
        return cls(entries, scale, None, cache)

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or self.root is None else self.root / path

    def images(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(lr, hr) float32 CHW pairs, loaded once."""
        if self._cache is None:
            pairs = []
            for e in self.entries:
                lr = _chw(to_float(read_png(self._resolve(e.lr_path)), np.float32))
                hr = _chw(to_float(read_png(self._resolve(e.hr_path)), np.float32))
                if hr.shape[1:] != (e.height, e.width):
                    raise DataError(f"{e.hr_path}: size differs from manifest")
                if lr.shape[1] * self.scale != e.height or lr.shape[2] * self.scale != e.width:
                    raise DataError(f"{e.lr_path}: LR size does not match HR / scale")
                pairs.append((lr, hr))
            self._cache = pairs
        return self._cache

    def to_tsv(self) -> str:
        lines = [MANIFEST_MAGIC, f"# scale={self.scale}", "\t".join(MANIFEST_COLUMNS)]
        for e in self.entries:
            lines.append("\t".join(str(getattr(e, c)) for c in MANIFEST_COLUMNS))
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_tsv())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise DataError(f"{path}: not a manifest file")
        scale = None
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("# scale="):
                scale = int(line.split("=", 1)[1])
                continue
            if line.startswith("#") or line.startswith("hr_path\t"):
                continue
            cols = line.split("\t")
            if len(cols) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            entries.append(ManifestEntry(cols[0], cols[1], int(cols[2]), int(cols[3]),
                                         cols[4], cols[5]))
        if scale is None:
            raise DataError(f"{path}: missing '# scale=' line")
        return cls(entries, scale, path.parent)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def _chw(hwc: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(hwc.transpose(2, 0, 1))


def _list_images(hr_dir: Path):
    return sorted(p for p in hr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def degrade(hr_dir, scale: int, out_dir) -> DatasetManifest:
    """Crop HR images to a multiple of ``scale``, bicubic-downscale them, write a manifest.

    Output layout: ``out_dir/HR/*.png``, ``out_dir/LR/*.png``,
    ``out_dir/manifest.tsv`` (paths relative to ``out_dir``).
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if not hr_dir.is_dir():
        raise DataError(f"HR directory not found: {hr_dir}")
    if scale not in (2, 3, 4):
        raise DataError(f"unsupported scale {scale}")
    entries = []
    for src in _list_images(hr_dir):
        img = read_png(src).pixels
        h, w = (img.shape[0] // scale) * scale, (img.shape[1] // scale) * scale
        if h == 0 or w == 0:
            raise DataError(f"{src}: {img.shape[1]}x{img.shape[0]} is smaller than scale {scale}")
        hr = img[:h, :w]
        lr = to_u8(bicubic_resize(hr, Fraction(1, scale), antialias=True))
        hr_rel = Path("HR") / f"{src.stem}.png"
        lr_rel = Path("LR") / f"{src.stem}.png"
        atomic_write_bytes(out_dir / hr_rel, encode_png(hr))
        atomic_write_bytes(out_dir / lr_rel, encode_png(lr))
        entries.append(ManifestEntry(hr_rel.as_posix(), lr_rel.as_posix(), w, h,
                                     sha256_file(out_dir / hr_rel),
                                     sha256_file(out_dir / lr_rel)))
    manifest = DatasetManifest(entries, scale, out_dir)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0-7) of the dihedral group on the last two axes.

    ``k % 4`` quarter turns counter-clockwise, then a horizontal flip when ``k >= 4``.
    """
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


@dataclass
class PatchBatch:
    lr: Tensor
    hr: Tensor
    indices: list  # (image index, lr_y, lr_x) per sample
    augment: list  # dihedral element per sample


def sample_batch(manifest: DatasetManifest, rng: np.random.Generator, config) -> PatchBatch:
    """Draw ``config.batch_size`` aligned LR/HR patches with replacement.

    Per sample, in order: image index, LR corner row, LR corner column,
    dihedral element (0 when ``config.augment`` is off).
    """
    s = manifest.scale
    p = config.hr_patch
    if p % s:
        raise DataError(f"HR patch {p} not divisible by scale {s}")
    lp = p // s
    pairs = manifest.images()
    if not pairs:
        raise DataError("empty manifest")
    lrs, hrs, indices, augs = [], [], [], []
    for _ in range(config.batch_size):
        i = int(rng.integers(len(pairs)))
        lr, hr = pairs[i]
        lh, lw = lr.shape[1:]
        if lp > lh or lp > lw:
            raise DataError(
                f"patch {p} larger than image {manifest.entries[i].hr_path} ({hr.shape[2]}x{hr.shape[1]})"
            )
        y = int(rng.integers(lh - lp + 1))
        x = int(rng.integers(lw - lp + 1))
        k = int(rng.integers(8)) if config.augment else 0
        lrs.append(dihedral(lr[:, y : y + lp, x : x + lp], k))
        hrs.append(dihedral(hr[:, s * y : s * y + p, s * x : s * x + p], k))
        indices.append((i, y, x))
        augs.append(k)
    return PatchBatch(Tensor(np.stack(lrs)), Tensor(np.stack(hrs)), indices, augs)


def synthetic_image(height: int = 64, width: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic smooth-plus-edges RGB test pattern as uint8 (H, W, 3)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = []
    for c in range(3):
        fy, fx = rng.uniform(0.02, 0.12, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        v = 0.5 + 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        v += 0.15 * (xx / max(width - 1, 1)) - 0.1 * (yy / max(height - 1, 1))
        v += 0.12 * ((yy - height / 2) ** 2 + (xx - width / 3) ** 2 < (min(height, width) / 4) ** 2)
        channels.append(v)
    return to_u8(np.clip(np.stack(channels, axis=-1), 0.0, 1.0))
