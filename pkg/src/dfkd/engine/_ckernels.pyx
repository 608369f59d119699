# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im; same layout and summation order as _kernels_py."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, int k, int stride, int padding):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, c * k * k, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t bi, ci, ki, kj, i, j, row, y, xx
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        for i in range(oh):
                            y = i * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for j in range(ow):
                                xx = j * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                ov[bi, row, i * ow + j] = xv[bi, ci, y, xx]
    return out


def col2im(cols, shape, int k, int stride, int padding):
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - k) // stride + 1
    cdef const double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(b, c * k * k, oh * ow)
    out = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t bi, ci, ki, kj, i, j, row, y, xx
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        for i in range(oh):
                            y = i * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for j in range(ow):
                                xx = j * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                ov[bi, ci, y, xx] += cv[bi, row, i * ow + j]
    return out
