"""Portable binary checkpoint container.

Layout (all integers little-endian)::

    b"SWMB" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | dtype u8 (0=f32, 1=f64) | rank u8
                | dims u64 * rank | raw payload
    config length u32 | UTF-8 "key = value" lines
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SWMB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def encode(tensors: dict[str, np.ndarray], config: dict[str, object]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    text = "".join(f"{k} = {format_value(config[k])}\n" for k in sorted(config)).encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _text(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("invalid UTF-8 in checkpoint") from None


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Returns tensors in file order and the raw (string-valued) config block."""
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: magic mismatch")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    body = buf[:-4]
    # checked before parsing so a damaged header cannot drive the reader
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint payload")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = _text(take(nlen))
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        if rank > 32:
            raise CheckpointError(f"tensor {name!r}: rank {rank} too large")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        nelem = math.prod(dims)
        payload = take(nelem * dt.itemsize)
        arr = np.frombuffer(payload, dtype=dt)
        if arr.size != nelem:
            raise CheckpointError(f"tensor {name!r}: element count mismatch")
        tensors[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
    (clen,) = struct.unpack("<I", take(4))
    text = _text(take(clen))
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after config block")
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        config[key] = value
    return tensors, config


def write(path, tensors, config) -> None:
    Path(path).write_bytes(encode(tensors, config))


def read(path):
    return decode(Path(path).read_bytes())
