"""Binary checkpoint format.

Layout (little-endian)::

    b"LAOF" | u32 version | u64 n_params |
    n_params x (u16 name_len | name utf-8 | u8 rank | u32 x rank extents | f32 data)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from laoflab.errors import FormatError, StorageError

MAGIC = b"LAOF"
VERSION = 1


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"parameter {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated parameter name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise FormatError(f"truncated data for parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter")
    return out


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(params))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
