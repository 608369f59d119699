"""Reader for IDX tensors (the MNIST distribution format), optionally gzipped."""
from __future__ import annotations

import gzip

import numpy as np

from ..errors import FormatError

_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _DTYPES:
        raise FormatError(f"{path}: not an IDX file")
    ndim = data[3]
    dims = np.frombuffer(data, dtype=">u4", count=ndim, offset=4).astype(int)
    dtype = np.dtype(_DTYPES[data[2]])
    count = int(np.prod(dims))
    body = data[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: expected {count} values, found {len(body) // dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def idx_images_to_float(images: np.ndarray) -> np.ndarray:
    """(M, H, W) uint8 -> (M, 1, H, W) float64 in [-1, 1]."""
    return images.astype(np.float64)[:, None] / 127.5 - 1.0
