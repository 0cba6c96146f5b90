"""Atomic file writes and the small binary helpers shared by the file formats."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

from .errors import TruncatedFile


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fingerprint(data: bytes) -> int:
    """64-bit BLAKE2b digest as an unsigned integer."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class Reader:
    """Sequential little-endian reader that raises TruncatedFile on short reads."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.what}: needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def name(self) -> str:
        return self.take(self.unpack("H")).decode("utf-8")

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw
