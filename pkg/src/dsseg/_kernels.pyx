# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col / col2im kernels for 3D convolution lowering."""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double

BACKEND = "cython"


def im2col3d(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t c = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t do_ = (d - k) // stride + 1
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    cdef Py_ssize_t L = do_ * ho * wo

    if real is float:
        out_np = np.empty((c * k * k * k, L), dtype=np.float32)
    else:
        out_np = np.empty((c * k * k * k, L), dtype=np.float64)
    cdef real[:, ::1] cols = out_np

    cdef Py_ssize_t ci, dz, dy, dx, iz, iy, ix, row, col
    with nogil:
        for ci in range(c):
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        row = ((ci * k + dz) * k + dy) * k + dx
                        col = 0
                        for iz in range(do_):
                            for iy in range(ho):
                                for ix in range(wo):
                                    cols[row, col] = x[ci, iz * stride + dz,
                                                       iy * stride + dy,
                                                       ix * stride + dx]
                                    col += 1
    return out_np


def col2im3d(real[:, ::1] cols, int c, int d, int h, int w, int k, int stride):
    cdef Py_ssize_t do_ = (d - k) // stride + 1
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1

    if real is float:
        out_np = np.zeros((c, d, h, w), dtype=np.float32)
    else:
        out_np = np.zeros((c, d, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np

    cdef Py_ssize_t ci, dz, dy, dx, iz, iy, ix, row, col
    with nogil:
        for ci in range(c):
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        row = ((ci * k + dz) * k + dy) * k + dx
                        col = 0
                        for iz in range(do_):
                            for iy in range(ho):
                                for ix in range(wo):
                                    out[ci, iz * stride + dz,
                                        iy * stride + dy,
                                        ix * stride + dx] += cols[row, col]
                                    col += 1
    return out_np
