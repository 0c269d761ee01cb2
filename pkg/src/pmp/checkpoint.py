"""Binary weight container: named float32 arrays behind a "PMPC" magic.

Layout (little-endian): magic "PMPC", version u32=1, then one record per
array: name length u16, UTF-8 name, rank u8, one u32 extent per axis,
float32 payload in row-major order. Records are sorted by name so identical
weights serialize to identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMPC"
VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed or unsupported containers."""


def write_weights(arrays: dict[str, np.ndarray], path) -> int:
    """Serialize named arrays; returns the byte count written."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} exceeds u8 for {name}")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))
    return len(blob)


def read_weights(path) -> dict[str, np.ndarray]:
    """Inverse of write_weights; validates every length before allocating."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"truncated container: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")

    out: dict[str, np.ndarray] = {}
    off = 8
    total = len(raw)
    while off < total:
        if off + 2 > total:
            raise CheckpointError(f"truncated record header at offset {off}")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + nlen + 1 > total:
            raise CheckpointError(f"truncated name at offset {off}")
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        rank = raw[off]
        off += 1
        if off + 4 * rank > total:
            raise CheckpointError(f"truncated extents for {name} at offset {off}")
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > total:
            raise CheckpointError(f"truncated payload for {name} at offset {off}")
        if name in out:
            raise CheckpointError(f"duplicate record {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        out[name] = arr.copy()
        off += nbytes
    return out
