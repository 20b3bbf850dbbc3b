"""Flat binary checkpoints: named float64 arrays plus the config hash.

Layout (all little-endian)::

    magic   4 bytes  b"MCGC"
    version u32      currently 1
    hash    u32 length + utf-8 bytes
    count   u32      number of arrays
    entry*  u32 name length + utf-8 name,
            u32 ndim, u64 * ndim shape,
            float64 * prod(shape) data

Raw float64 bytes round-trip bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MCGC"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointHashMismatch(CheckpointError):
    pass


def save_checkpoint(path, config_hash: str, arrays: dict[str, np.ndarray]):
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    hash_bytes = config_hash.encode("utf-8")
    blob += struct.pack("<I", len(hash_bytes)) + hash_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes)) + name_bytes
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _take(buf: memoryview, offset: int, count: int, what: str):
    if offset + count > len(buf):
        raise CheckpointError(f"checkpoint truncated inside {what}")
    return buf[offset:offset + count], offset + count


def load_checkpoint(path, expect_hash: str | None = None):
    """Returns ``(config_hash, {name: array})``; verifies the hash if given."""
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    chunk, off = _take(buf, 0, 4, "magic")
    if bytes(chunk) != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(chunk)!r}")
    chunk, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", chunk)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    chunk, off = _take(buf, off, 4, "hash length")
    hash_len = struct.unpack("<I", chunk)[0]
    chunk, off = _take(buf, off, hash_len, "hash")
    stored_hash = bytes(chunk).decode("utf-8")
    if expect_hash is not None and stored_hash != expect_hash:
        raise CheckpointHashMismatch(
            f"checkpoint was written for config {stored_hash}, "
            f"current config hashes to {expect_hash}"
        )
    chunk, off = _take(buf, off, 4, "array count")
    count = struct.unpack("<I", chunk)[0]
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = _take(buf, off, 4, "name length")
        name_len = struct.unpack("<I", chunk)[0]
        chunk, off = _take(buf, off, name_len, "name")
        name = bytes(chunk).decode("utf-8")
        chunk, off = _take(buf, off, 4, "ndim")
        ndim = struct.unpack("<I", chunk)[0]
        chunk, off = _take(buf, off, 8 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}Q", chunk) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        chunk, off = _take(buf, off, 8 * size, f"data for {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last array")
    return stored_hash, arrays
