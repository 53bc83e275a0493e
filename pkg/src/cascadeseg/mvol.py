"""MVOL: a minimal little-endian container for multi-channel 3-D volumes.

Header (24 bytes, little-endian)::

    magic      4s   b"MVOL"
    version    u16  1
    dtype      u16  1 = float32, 2 = uint8
    channels   u32
    extents    3 x u32 (X, Y, Z)

The payload follows immediately: channel by channel, and within a channel
x varies fastest, then y, then z.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MVOL"
VERSION = 1
HEADER = struct.Struct("<4sHHI3I")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}
MAX_ELEMENTS = 1 << 36


class MvolError(ValueError):
    pass


class BadMagicError(MvolError):
    pass


class TruncatedPayloadError(MvolError):
    pass


class ExtentOverflowError(MvolError):
    pass


class UnsupportedDtypeError(MvolError):
    pass


def _as_4d(array: np.ndarray) -> np.ndarray:
    a = np.asarray(array)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"MVOL holds [C, X, Y, Z] or [X, Y, Z] arrays, got shape {a.shape}")
    return a


def encode(array: np.ndarray) -> bytes:
    a = _as_4d(array)
    code = CODES.get(a.dtype)
    if code is None:
        raise UnsupportedDtypeError(f"unsupported dtype {a.dtype}; use float32 or uint8")
    if any(n < 1 for n in a.shape):
        raise ExtentOverflowError(f"extents must be positive, got {a.shape}")
    header = HEADER.pack(MAGIC, VERSION, code, *a.shape)
    # x fastest: write each channel in Fortran order
    payload = np.ascontiguousarray(a.transpose(0, 3, 2, 1)).astype(DTYPES[code], copy=False)
    return header + payload.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        if buf[:4] != MAGIC[:len(buf[:4])]:
            raise BadMagicError("not an MVOL file")
        raise TruncatedPayloadError(f"header truncated ({len(buf)} of {HEADER.size} bytes)")
    magic, version, code, c, x, y, z = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MvolError(f"unsupported MVOL version {version}")
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    if min(c, x, y, z) < 1:
        raise ExtentOverflowError(f"non-positive extents {(c, x, y, z)}")
    n = c * x * y * z
    if n > MAX_ELEMENTS:
        raise ExtentOverflowError(f"extents {(c, x, y, z)} exceed {MAX_ELEMENTS} elements")
    dt = DTYPES[code]
    expected = n * dt.itemsize
    have = len(buf) - HEADER.size
    if have < expected:
        raise TruncatedPayloadError(f"payload has {have} bytes, expected {expected}")
    if have > expected:
        raise MvolError(f"{have - expected} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=HEADER.size).reshape(c, z, y, x)
    return np.ascontiguousarray(arr.transpose(0, 3, 2, 1)).astype(dt.newbyteorder("="), copy=False)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mvol(array: np.ndarray, path: str | Path) -> None:
    _atomic_write(Path(path), encode(array))


def read_mvol(path: str | Path) -> np.ndarray:
    """Returns a [C, X, Y, Z] array (single-channel volumes keep their channel axis)."""
    return decode(Path(path).read_bytes())


def write_sidecar(path: str | Path, meta: dict) -> None:
    _atomic_write(Path(str(path) + ".json"), json.dumps(meta, indent=2).encode())


def read_sidecar(path: str | Path) -> dict:
    p = Path(str(path) + ".json")
    return json.loads(p.read_text()) if p.exists() else {}
