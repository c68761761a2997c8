"""VRST tensor files.

Record layout: ``b"VRST"``, version (u16), rank (u8), ``rank`` extents
(u32), then the payload as float32. All integers and floats little-endian,
payload row-major. Records may be concatenated into one file.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"VRST"
VERSION = 1


class VRSTFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")  # ascontiguousarray would turn 0-d into 1-d
    if arr.ndim > 255:
        raise VRSTFormatError("rank too large")
    header = MAGIC + struct.pack("<HB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def write(fh: BinaryIO, array) -> int:
    blob = encode(array)
    fh.write(blob)
    return len(blob)


def read(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) < 7 or head[:4] != MAGIC:
        raise VRSTFormatError("missing VRST magic")
    version, rank = struct.unpack("<HB", head[4:])
    if version != VERSION:
        raise VRSTFormatError(f"unsupported VRST version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise VRSTFormatError("truncated VRST payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read(fh)
