"""Bit-exact checkpoint container.

Layout: magic "MEF1", version u32, length-prefixed UTF-8 config text, then
records until EOF. Record: name (u32 length + UTF-8), rank u32, extents
(u32 each), raw little-endian float64 data. All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MEF1"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic/version or truncation; message carries the byte offset."""


def save(path, config_text: str, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)  # 0-d stays rank 0
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes(order="C"))


def _take(raw, offset, n, what):
    if offset + n > len(raw):
        raise CheckpointError(f"truncated {what} at byte offset {offset}")
    return raw[offset : offset + n], offset + n


def load(path):
    """Returns (config_text, arrays); strict about framing."""
    with open(path, "rb") as fh:
        raw = fh.read()
    chunk, offset = _take(raw, 0, 4, "magic")
    if chunk != MAGIC:
        raise CheckpointError(f"bad magic {chunk!r} at byte offset 0")
    chunk, offset = _take(raw, offset, 4, "version")
    (version,) = struct.unpack("<I", chunk)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte offset 4")
    chunk, offset = _take(raw, offset, 4, "config length")
    (clen,) = struct.unpack("<I", chunk)
    chunk, offset = _take(raw, offset, clen, "config text")
    config_text = chunk.decode("utf-8")
    arrays = {}
    while offset < len(raw):
        chunk, offset = _take(raw, offset, 4, "record name length")
        (nlen,) = struct.unpack("<I", chunk)
        chunk, offset = _take(raw, offset, nlen, "record name")
        name = chunk.decode("utf-8")
        chunk, offset = _take(raw, offset, 4, "record rank")
        (rank,) = struct.unpack("<I", chunk)
        if rank > 4:
            raise CheckpointError(f"record {name!r}: rank {rank} at byte offset {offset - 4}")
        extents = []
        for _ in range(rank):
            chunk, offset = _take(raw, offset, 4, "record extent")
            extents.append(struct.unpack("<I", chunk)[0])
        count = int(np.prod(extents)) if extents else 1
        chunk, offset = _take(raw, offset, count * 8, f"record data for {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(extents).copy()
    return config_text, arrays
