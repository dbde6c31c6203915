"""Binary containers for volumes, label maps, displacement fields and checkpoints.

Volume file (``.dvol``), all little-endian::

    offset  size  field
    0       4     magic b"DVOL"
    4       2     u16 format version (1)
    6       2     u16 kind code: 1 intensity, 2 labels, 3 displacement field
    8       2     u16 channel count (1, or 3 for fields)
    10      12    u32 x3 spatial dims (D, H, W)
    22      12    f32 x3 voxel spacing in mm
    34      ...   f32 payload, row-major, channel-major for fields

Label values are stored as exact small integers in the float payload.

Checkpoint file (``.dckp``)::

    magic b"DCKP", u16 version (1)
    u32 n, n bytes of UTF-8 JSON metadata (config, variant, ...)
    u64 iteration
    u32 parameter count, then per parameter in order:
        u16 name length, name bytes, u8 ndim, u32 x ndim shape, f32 values
    u8 optimizer flag; when 1:
        u64 optimizer step, then per parameter (same order) first-moment
        values followed by second-moment values, f32 each
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedPayloadError, VersionMismatchError, VolumeFormatError

VOLUME_MAGIC = b"DVOL"
CHECKPOINT_MAGIC = b"DCKP"
FORMAT_VERSION = 1

KIND_CODES = {"intensity": 1, "labels": 2, "field": 3}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_VOL_HEADER = struct.Struct("<4sHHH3I3f")

# tensors in a checkpoint are at most 5-D; anything larger is a corrupt header
MAX_NDIM = 8


@dataclass
class VolumeRecord:
    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: str


def encode_volume(array, kind: str = "intensity", spacing=(1.0, 1.0, 1.0)) -> bytes:
    if kind not in KIND_CODES:
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    arr = np.asarray(array)
    if kind == "field":
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise VolumeFormatError(f"field must have shape (3, D, H, W), got {arr.shape}")
        channels, dims = 3, arr.shape[1:]
    else:
        if arr.ndim != 3:
            raise VolumeFormatError(f"{kind} volume must have shape (D, H, W), got {arr.shape}")
        channels, dims = 1, arr.shape
    header = _VOL_HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, KIND_CODES[kind], channels, *dims, *spacing)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> VolumeRecord:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"bad magic: expected {VOLUME_MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _VOL_HEADER.size:
        raise TruncatedPayloadError(f"truncated payload: header needs {_VOL_HEADER.size} bytes, file has {len(buf)}")
    _, version, code, channels, d, h, w, sd, sh, sw = _VOL_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file is v{version}, reader supports v{FORMAT_VERSION}")
    if code not in _KIND_NAMES:
        raise VolumeFormatError(f"unknown kind code {code}")
    expected = channels * d * h * w * 4
    payload = buf[_VOL_HEADER.size :]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"truncated payload: header dims {channels}x{d}x{h}x{w} need {expected} bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    kind = _KIND_NAMES[code]
    arr = arr.reshape((3, d, h, w) if kind == "field" else (d, h, w))
    if kind == "labels":
        arr = arr.astype(np.int64)
    return VolumeRecord(arr, (sd, sh, sw), kind)


def write_volume(path, array, kind: str = "intensity", spacing=(1.0, 1.0, 1.0)) -> None:
    data = encode_volume(array, kind, spacing)
    Path(path).write_bytes(data)


def read_volume(path) -> VolumeRecord:
    return decode_volume(Path(path).read_bytes())


# -- checkpoints -------------------------------------------------------------


def _f32(t) -> bytes:
    return np.ascontiguousarray(np.asarray(t), dtype="<f4").tobytes()


def encode_checkpoint(meta: dict, params: dict, iteration: int = 0, optimizer=None) -> bytes:
    """``params`` maps names to arrays; ``optimizer`` is ``(step, m, v)`` with dicts keyed like params."""
    out = [struct.pack("<4sH", CHECKPOINT_MAGIC, FORMAT_VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<QI", iteration, len(params)))
    for name, value in params.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(_f32(arr))
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        step, m, v = optimizer
        out.append(struct.pack("<BQ", 1, step))
        for name in params:
            out.append(_f32(m[name]))
            out.append(_f32(v[name]))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"truncated payload: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def text(self, n: int, what: str) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise VolumeFormatError(f"corrupt {what}: not valid UTF-8 ({exc.reason})") from None

    def floats(self, shape) -> np.ndarray:
        if len(shape) > MAX_NDIM:
            raise VolumeFormatError(f"corrupt tensor header: {len(shape)} dimensions (max {MAX_NDIM})")
        n = math.prod(int(s) for s in shape)
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def decode_checkpoint(buf: bytes):
    """Inverse of :func:`encode_checkpoint`: ``(meta, params, iteration, optimizer_or_None)``."""
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, found {bytes(buf[:4])!r}")
    r = _Reader(buf)
    _, version = r.unpack("<4sH")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file is v{version}, reader supports v{FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.text(n, "checkpoint metadata"))
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"corrupt checkpoint metadata: {exc.msg}") from None
    if not isinstance(meta, dict):
        raise VolumeFormatError("corrupt checkpoint metadata: expected a JSON object")
    iteration, count = r.unpack("<QI")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.text(ln, "parameter name")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = r.floats(shape)
    (flag,) = r.unpack("<B")
    optimizer = None
    if flag:
        (step,) = r.unpack("<Q")
        m, v = {}, {}
        for name, value in params.items():
            m[name] = r.floats(value.shape)
            v[name] = r.floats(value.shape)
        optimizer = (step, m, v)
    if r.pos != len(buf):
        raise TruncatedPayloadError(f"truncated payload: {len(buf) - r.pos} unexpected bytes after checkpoint payload")
    return meta, params, iteration, optimizer
