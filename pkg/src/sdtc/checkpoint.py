"""Binary tensor container used for checkpoints, optimizer state and inference output.

Layout (little-endian): magic ``SDTC``, version u32, entry count u32; per entry
name length u16, UTF-8 name, dtype code u8, rank u8, extents u32 each, then the
raw 32-bit values.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDTC"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODE_OF = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class CheckpointError(ValueError):
    pass


def encode(entries: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", MAGIC, VERSION, len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        arr = arr.astype("<i4") if np.issubdtype(arr.dtype, np.integer) else arr.astype("<f4")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode(raw: bytes) -> dict[str, np.ndarray]:
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated container at byte offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _CODES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return out


def save(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def optimizer_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".opt" + p.suffix)
