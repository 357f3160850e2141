"""Low-level helpers for the binary artifact formats.

All on-disk formats in this package are little-endian and end with a 64-bit
FNV-1a checksum of every preceding byte (magic included), so corruption and
truncation are detected before any partial state is built.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

from newsrec.errors import FormatError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = (1 << 64) - 1


def fnv1a64(data: bytes | bytearray | memoryview, value: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over `data`, continuing from `value`."""
    h = value
    for b in memoryview(data):
        h = ((h ^ b) * _FNV_PRIME) & _U64_MASK
    return h


class ChecksumWriter:
    """Builds a checksummed artifact: magic, payload, trailing u64 FNV-1a."""

    def __init__(self, magic: bytes) -> None:
        self._chunks: list[bytes] = [bytes(magic)]

    def write(self, data: bytes) -> None:
        self._chunks.append(data)

    def pack(self, fmt: str, *values) -> None:
        self.write(struct.pack(fmt, *values))

    def write_str(self, text: str, len_fmt: str = "<H") -> None:
        raw = text.encode("utf-8")
        self.pack(len_fmt, len(raw))
        self.write(raw)

    def finish(self) -> bytes:
        body = b"".join(self._chunks)
        return body + struct.pack("<Q", fnv1a64(body))

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.finish())


class PayloadReader:
    """Sequential reader over a checksum-verified payload."""

    def __init__(self, payload: bytes, source: str = "<bytes>") -> None:
        self._buf = payload
        self._pos = 0
        self._source = source

    def read(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise FormatError(f"{self._source}: unexpected end of data")
        out = self._buf[self._pos : end]
        self._pos = end
        return out

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.read(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def read_str(self, len_fmt: str = "<H") -> str:
        n = self.unpack(len_fmt)
        return self.read(n).decode("utf-8")

    def at_end(self) -> bool:
        return self._pos == len(self._buf)


def read_checksummed(path: str | Path, magic: bytes) -> PayloadReader:
    """Validate magic bytes and trailing checksum, return a payload reader.

    The payload starts immediately after the magic and excludes the trailing
    checksum. Raises FormatError on any mismatch; never yields partial data.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(magic) + 8:
        raise FormatError(f"{path}: file too short")
    if blob[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    (stored,) = struct.unpack("<Q", blob[-8:])
    if fnv1a64(blob[:-8]) != stored:
        raise FormatError(f"{path}: checksum mismatch")
    return PayloadReader(blob[len(magic) : -8], source=str(path))


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write `data` to `path` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (hash() is salted; this isn't).

    Used to give every user an RNG stream that is independent of worker
    scheduling, so parallel runs reproduce serial ones bit for bit.
    """
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
