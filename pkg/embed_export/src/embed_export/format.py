"""DNNR-EMB binary format, little-endian.

    magic "DNNREMB1" | u32 version=1 | u32 dim | u64 count
    count * [u16 id_len | id utf-8 | dim * f32]
    u64 FNV-1a checksum of all preceding bytes

This mirrors (by contract, not by import) the format the recommendation
engine reads; the checksum makes truncation and bit flips detectable.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"DNNREMB1"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = (1 << 64) - 1


class FormatError(Exception):
    pass


def fnv1a64(data: bytes, value: int = _FNV_OFFSET) -> int:
    h = value
    for b in memoryview(data):
        h = ((h ^ b) * _FNV_PRIME) & _U64_MASK
    return h


def write_embedding_file(
    path: str | Path, dim: int, records: Iterable[tuple[str, np.ndarray]]
) -> int:
    """Write records to `path` atomically; returns the record count."""
    chunks = [MAGIC]
    body: list[bytes] = []
    count = 0
    for news_id, vector in records:
        vector = np.asarray(vector)
        if vector.shape != (dim,):
            raise FormatError(f"vector for {news_id!r} has shape {vector.shape}, expected ({dim},)")
        raw_id = news_id.encode("utf-8")
        body.append(struct.pack("<H", len(raw_id)))
        body.append(raw_id)
        body.append(np.ascontiguousarray(vector, dtype="<f4").tobytes())
        count += 1
    chunks.append(struct.pack("<IIQ", VERSION, dim, count))
    chunks.extend(body)
    payload = b"".join(chunks)
    blob = payload + struct.pack("<Q", fnv1a64(payload))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return count


def read_header(path: str | Path) -> tuple[int, int, int]:
    """Validate magic and checksum, return (version, dim, count)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 24 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a DNNR-EMB file")
    (stored,) = struct.unpack("<Q", blob[-8:])
    if fnv1a64(blob[:-8]) != stored:
        raise FormatError(f"{path}: checksum mismatch")
    version, dim, count = struct.unpack_from("<IIQ", blob, len(MAGIC))
    return version, dim, count


def iter_records(path: str | Path) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (news_id, vector) after validating the checksum."""
    blob = Path(path).read_bytes()
    read_header(path)
    _, dim, count = struct.unpack_from("<IIQ", blob, len(MAGIC))
    pos = len(MAGIC) + 16
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        news_id = blob[pos : pos + id_len].decode("utf-8")
        pos += id_len
        vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos).copy()
        pos += 4 * dim
        yield news_id, vector
    if pos != len(blob) - 8:
        raise FormatError(f"{path}: trailing bytes after {count} records")
