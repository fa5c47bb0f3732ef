"""Binary tensor containers: model checkpoints (FFCK) and feature dumps (FFTN).

Layout, all little-endian::

    magic (4 bytes) | u32 version | u32 count
    count x { u32 name_len | name (UTF-8) | u32 ndim | u64 dims[ndim] | f64 values }
    u32 meta_len | meta (UTF-8 JSON)
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

CHECKPOINT_MAGIC = b"FFCK"
TENSORS_MAGIC = b"FFTN"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable or incompatible tensor files."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    """Parameter names or shapes differ from what the model expects."""


def encode_tensors(tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None,
                   magic: bytes = CHECKPOINT_MAGIC) -> bytes:
    parts = [magic, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    text = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(buf: bytes, magic: bytes = CHECKPOINT_MAGIC) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    r = _Reader(buf)
    if len(buf) < 4 and magic.startswith(buf):
        raise TruncatedError(f"file ends inside the magic ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not UTF-8: {exc}") from None
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config block is not valid JSON: {exc}") from None
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after config block")
    return tensors, meta


def _write_atomic(path: str | os.PathLike, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(model, path: str | os.PathLike, config: dict | None = None) -> None:
    """Write every parameter of ``model`` plus a config echo."""
    meta = {"model": model.config.to_dict()}
    if config is not None:
        meta["train"] = config
    _write_atomic(path, encode_tensors(model.state_dict(), meta))


def read_checkpoint(path: str | os.PathLike) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def load_into(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``model``; nothing is modified unless everything matches."""
    own = OrderedDict(model.named_parameters())
    missing = [n for n in own if n not in tensors]
    extra = [n for n in tensors if n not in own]
    if missing or extra:
        raise ShapeMismatchError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for n, p in own.items():
        if tensors[n].shape != p.shape:
            raise ShapeMismatchError(f"{n}: checkpoint shape {tensors[n].shape}, model {p.shape}")
    for n, p in own.items():
        p.data = np.array(tensors[n], dtype=np.float64)


def load_checkpoint(path: str | os.PathLike):
    """Rebuild the model recorded in ``path``; returns ``(model, meta)``."""
    from .model import FusionNet, ModelConfig

    tensors, meta = read_checkpoint(path)
    try:
        cfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"checkpoint config is incompatible: {exc}") from None
    model = FusionNet(cfg)
    load_into(model, tensors)
    return model, meta


def save_tensors(path: str | os.PathLike, tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    _write_atomic(path, encode_tensors(tensors, meta, TENSORS_MAGIC))


def load_tensors(path: str | os.PathLike) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), TENSORS_MAGIC)
