"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"PANCKPT\\0"
    version      u32
    count        u32
    count x entry:
        name_len u16, name (utf-8), dtype u8, ndim u8, ndim x u32 dims
    payloads     concatenated, in entry order
    checksum     u64, first 8 bytes of blake2b over the payload region

dtype codes: 0 = f32 tensor, 1 = u8 blob (used for the JSON metadata entry).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .utils import atomic_write_bytes

MAGIC = b"PANCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}
META_KEY = "__meta__"


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = np.dtype("u1") if arr.dtype == np.uint8 else np.dtype("<f4")
        arr = np.ascontiguousarray(arr, dtype=dt)
        raw_name = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw_name)) + raw_name)
        header.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payloads.append(arr.tobytes())
    payload = b"".join(payloads)
    return b"".join(header) + payload + struct.pack("<Q", _checksum(payload))


def unpack_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 16
        specs = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            specs.append((name, _DTYPES[code], shape))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    payload_start = off
    out = {}
    for name, dt, shape in specs:
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data) - 8:
            raise DataError("truncated checkpoint payload")
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                  offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data) - 8:
        raise DataError("checkpoint has trailing bytes before checksum")
    (stored,) = struct.unpack_from("<Q", data, off)
    if stored != _checksum(data[payload_start:off]):
        raise DataError("checkpoint checksum mismatch")
    return out


@dataclass
class Checkpoint:
    """Model parameters, Adam moments, iteration counter, RNG state and config echo."""

    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    adam_step: int = 0
    rng_state: dict | None = None
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "iteration": self.iteration,
            "adam_step": self.adam_step,
            "rng_state": self.rng_state,
            "model_config": self.model_config,
            "train_config": self.train_config,
        }

    def to_bytes(self) -> bytes:
        tensors = {}
        tensors.update({f"param/{k}": v for k, v in self.params.items()})
        tensors.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
        meta = json.dumps(self.meta(), sort_keys=True, separators=(",", ":"))
        tensors[META_KEY] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
        return pack_tensors(tensors)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors = unpack_tensors(data)
        if META_KEY not in tensors:
            raise DataError("checkpoint has no metadata entry")
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode("utf-8"))
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key, arr in tensors.items():
            prefix, _, name = key.partition("/")
            if prefix not in groups:
                raise DataError(f"unknown checkpoint entry {key!r}")
            groups[prefix][name] = arr
        return cls(groups["param"], groups["adam_m"], groups["adam_v"],
                   meta["iteration"], meta["adam_step"], meta["rng_state"],
                   meta["model_config"], meta["train_config"])

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)
