"""Low-level helpers for the versioned little-endian binary model files.

Every binary artifact starts with a 4-byte ASCII magic followed by a u32
version.  Payload arrays are stored as IEEE-754 f32, counts as u32/u64,
strings as u32 byte length + UTF-8 bytes.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import DataError


def write_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_magic(fh: BinaryIO, magic: bytes, path: str) -> int:
    got = fh.read(4)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
    return version


def _read_exact(fh: BinaryIO, n: int, path: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO, path: str) -> int:
    (value,) = struct.unpack("<I", _read_exact(fh, 4, path))
    return value


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def read_u64(fh: BinaryIO, path: str) -> int:
    (value,) = struct.unpack("<Q", _read_exact(fh, 8, path))
    return value


def write_f32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(data.tobytes())


def read_f32_array(fh: BinaryIO, count: int, path: str) -> np.ndarray:
    buf = _read_exact(fh, 4 * count, path)
    # float64 in memory throughout; files stay f32.
    return np.frombuffer(buf, dtype="<f4").astype(np.float64)


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO, path: str) -> str:
    n = read_u32(fh, path)
    return _read_exact(fh, n, path).decode("utf-8")
