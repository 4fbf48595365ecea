"""Versioned binary checkpoint container.

Layout: magic bytes, u32 format version, u32 config length + UTF-8 JSON
config block, u32 tensor count, then per tensor: u16 name length + name,
u8 ndim, u32 dims, and raw little-endian float32 data. Round trips are
bit-exact because parameters are kept float32-representable in memory.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"VOXCKPT\x00"
VERSION = 1


def f32_representable(x: np.ndarray) -> np.ndarray:
    """Round a float64 array to the nearest float32 grid (kept as float64)."""
    return x.astype(np.float32).astype(np.float64)


def save_container(path, config: dict, tensors: dict) -> None:
    """Write named float tensors plus a JSON config block."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def pull(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.pull(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.pull(1))[0]


def load_container(path):
    """Read back (config, tensors). Raises FormatError on any corruption."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.pull(len(MAGIC)) != MAGIC:
        raise FormatError("not a voxtract checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.pull(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.pull(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = r.pull(4 * count)
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        )
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return config, tensors
