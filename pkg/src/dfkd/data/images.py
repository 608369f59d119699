"""Binary PGM (P5) and PPM (P6) dumps, 8 bits per sample."""
from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError


def to_uint8(images, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Map floats in [low, high] to 0..255 (rounded, clipped)."""
    x = (np.asarray(images, dtype=np.float64) - low) / (high - low)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, pixels) -> None:
    """(H, W) uint8 -> P5, (H, W, 3) uint8 -> P6."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise FormatError(f"PNM dumps take uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos)
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise FormatError(f"{os.fspath(path)}: only 8-bit P5/P6 files are supported")
    w, h = int(w), int(h)
    ch = 1 if magic == b"P5" else 3
    body = data[pos:pos + w * h * ch]
    if len(body) != w * h * ch:
        raise FormatError(f"{os.fspath(path)}: pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def tile(images: np.ndarray, cols: int = 8, pad: int = 1, fill: int = 0) -> np.ndarray:
    """Arrange (M, H, W[, 3]) uint8 images into one grid image."""
    m, h, w = images.shape[:3]
    rows = -(-m // cols)
    shape = (rows * (h + pad) + pad, cols * (w + pad) + pad) + images.shape[3:]
    grid = np.full(shape, fill, dtype=np.uint8)
    for i in range(m):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = images[i]
    return grid
