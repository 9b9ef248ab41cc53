"""Portable binary weight file ("VGW1").

Layout, all integers little-endian::

    magic      4 bytes  b"VGW1"
    version    u32      1
    count      u32      number of entries
    entry*     u32 name length, UTF-8 name,
               u32 dtype code (1 = float32), u32 rank,
               u64 dims[rank], raw float32 values (row-major)
    trailer    u32      CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedFileError, WeightFileError

MAGIC = b"VGW1"
VERSION = 1
DTYPE_F32 = 1


@dataclass(frozen=True)
class WeightEntry:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def encode(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<II", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> list[WeightEntry]:
    """Parse and validate a weight file image.

    Raises BadMagicError, TruncatedFileError or ChecksumError; structural
    checks run before the CRC so truncation is reported as such.
    """
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("bad magic: not a VGW1 weight file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        # the final 4 bytes are the CRC trailer
        if n < 0 or pos + n > len(blob) - 4:
            raise TruncatedFileError(
                f"truncated weight file: need {n} bytes at offset {pos}, "
                f"{max(len(blob) - 4 - pos, 0)} available")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChecksumError(f"entry name is not valid UTF-8 ({exc}); file corrupted") from exc
        dtype, rank = struct.unpack("<II", take(8))
        if dtype != DTYPE_F32:
            raise WeightFileError(f"entry {name!r}: unsupported dtype code {dtype}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = 1
        for d in shape:
            size *= d
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        entries.append(WeightEntry(name, tuple(int(d) for d in shape), values))
    if pos != len(blob) - 4:
        raise WeightFileError(
            f"{len(blob) - 4 - pos} unexpected bytes after the last entry")
    (stored,) = struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    return entries


def write_weight_file(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(entries))
    tmp.replace(path)


def read_weight_file(path) -> list[WeightEntry]:
    return decode(Path(path).read_bytes())
