"""Pure numpy im2col / col2im used when the compiled kernels are absent.

Layout: ``cols[b, (c, ki, kj), (oh, ow)]`` with ``c`` slowest. col2im adds
contributions kernel offset by kernel offset, so every output element sums
its terms in (ki, kj) order; the compiled kernels follow the same order and
agree bit for bit.
"""
import numpy as np


def im2col(x, k, stride, padding):
    b, c, h, w = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=np.float64)
    hi = stride * (oh - 1) + 1
    wi = stride * (ow - 1) + 1
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki:ki + hi:stride, kj:kj + wi:stride]
    return cols.reshape(b, c * k * k, oh * ow)


def col2im(cols, shape, k, stride, padding):
    b, c, h, w = shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(b, c, k, k, oh, ow)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    hi = stride * (oh - 1) + 1
    wi = stride * (ow - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + hi:stride, kj:kj + wi:stride] += cols[:, :, ki, kj]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)
