"""Named-tensor container used for checkpoints and preprocessing caches.

Layout (all integers little-endian)::

    magic    8 bytes  b"MS3DTNSR"
    version  u32      FORMAT_VERSION
    kind     u32 length + utf-8 bytes   ("checkpoint", "cache", ...)
    count    u32
    count x entry:
        name   u32 length + utf-8 bytes
        dtype  u8      0 = float64, 1 = int64
        ndim   u32
        shape  ndim x u64
        data   prod(shape) x 8 bytes, C order

There is no timestamp or padding, so identical content gives identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MS3DTNSR"
FORMAT_VERSION = 1
_DTYPES = {0: "<f8", 1: "<i8"}


class TensorFileError(ValueError):
    pass


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(tensors: dict, kind="checkpoint") -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(kind), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            code, arr = 1, arr.astype("<i8")
        else:
            code, arr = 0, arr.astype("<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data: bytes, kind=None) -> dict:
    if data[:8] != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TensorFileError("truncated tensor file")
        out = data[pos : pos + n]
        pos += n
        return out

    def take_str():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported tensor file version {version} (expected {FORMAT_VERSION})")
    found_kind = take_str()
    if kind is not None and found_kind != kind:
        raise TensorFileError(f"expected a {kind!r} file, found {found_kind!r}")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        name = take_str()
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise TensorFileError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype=_DTYPES[code]).reshape(shape)
        out[name] = arr.astype(np.float64 if code == 0 else np.int64)
    return out


def save(path, tensors: dict, kind="checkpoint"):
    with open(path, "wb") as f:
        f.write(dumps(tensors, kind))


def load(path, kind=None) -> dict:
    with open(path, "rb") as f:
        return loads(f.read(), kind)
