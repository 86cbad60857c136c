"""Little-endian binary container for checkpoints and datasets.

Layout::

    magic (8 bytes) | u32 version | u32 header_len | header (UTF-8 JSON)
    | u32 blob_count | blobs... | u32 crc32(all preceding bytes)

    blob := u16 name_len | name | u8 dtype_code | u8 ndim | u32 * ndim shape
            | u64 nbytes | raw little-endian data
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

VERSION = 1

_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
}
_DTYPES = {v: k for k, v in _CODES.items()}


class ContainerError(ValueError):
    """Raised for truncated, corrupt or mismatched container files."""


def dumps(magic: bytes, header: dict, blobs: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(magic)
    buf.write(struct.pack("<II", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for blob {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 20:
        raise ContainerError(f"{source}: file is truncated ({len(data)} bytes)")
    if data[:8] != magic:
        raise ContainerError(f"{source}: bad magic {data[:8]!r}, expected {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise ContainerError(f"{source}: file is truncated at byte {pos}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported version {version}")
    try:
        header = json.loads(take(head_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{source}: corrupt header ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode(errors="replace")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"{source}: blob {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise ContainerError(f"{source}: blob {name!r} size does not match its shape {shape}")
        blobs[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise ContainerError(f"{source}: {len(body) - pos} trailing bytes")
    if zlib.crc32(body) != crc:
        raise ContainerError(f"{source}: checksum mismatch, file is corrupt")
    return header, blobs


def write(path, magic: bytes, header: dict, blobs: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, header, blobs))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    return loads(path.read_bytes(), magic, str(path))
