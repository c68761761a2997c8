"""Binary PPM (P6) and PGM (P5) with maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` header tokens (comments skipped) and the payload offset."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        out.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """(H, W, 3) uint8 for P6, (H, W) uint8 for P5."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P6 or P5")
    (_, w, h, maxval), offset = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    payload = data[offset:]
    if len(payload) != n:
        raise ImageFormatError(f"header declares {w}x{h}x{channels} = {n} bytes, payload has {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return arr if channels == 3 else arr[..., 0]


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"expected (H, W, 3) or (H, W), got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))


def to_float(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return np.moveaxis(np.asarray(img, dtype=np.float64) / 255.0, -1, 0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8 with rounding."""
    return np.moveaxis(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), 0, -1)
