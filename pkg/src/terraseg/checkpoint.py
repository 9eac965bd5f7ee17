"""Binary checkpoint container.

Layout (little-endian)::

    b"SSEG"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 extent, float32 data }
    u32 CRC32 of every preceding byte

Tensors are stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SSEG"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise CheckpointFormatError("file too short for header and checksum", len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}", 0)
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    body = blob[:-4]
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)

    out: dict[str, np.ndarray] = {}
    pos = 12

    def need(n: int, what: str):
        if pos + n > len(body):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)

    for _ in range(count):
        need(2, "name length")
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(n, "name")
        try:
            name = body[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not UTF-8", pos) from None
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", pos)
        pos += n
        need(1, f"rank of {name}")
        rank = body[pos]
        pos += 1
        need(4 * rank, f"extents of {name}")
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(nbytes, f"data of {name}")
        out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointFormatError("trailing bytes after last tensor", pos)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError("CRC32 mismatch", len(body))
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: a reader never sees a half-written checkpoint."""
    path = Path(path)
    blob = encode(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def crc_of(path) -> int:
    (crc,) = struct.unpack("<I", Path(path).read_bytes()[-4:])
    return crc
