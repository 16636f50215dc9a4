# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-step image kernels: separable blur, channel-mean residual,
mask pooling, and masked blending. Semantics match _numpy_impl exactly."""

import numpy as np

BACKEND = "cython"


def blur2d(img, taps):
    cdef double[:, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[::1] t = np.ascontiguousarray(taps, dtype=np.float64)
    cdef Py_ssize_t H = src.shape[0], W = src.shape[1]
    cdef Py_ssize_t radius = t.shape[0] // 2
    tmp_arr = np.zeros((H, W), dtype=np.float64)
    out_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, jj, ii
    cdef double acc
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for k in range(t.shape[0]):
                jj = j + k - radius
                if 0 <= jj < W:
                    acc += src[i, jj] * t[k]
            tmp[i, j] = acc
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for k in range(t.shape[0]):
                ii = i + k - radius
                if 0 <= ii < H:
                    acc += tmp[ii, j] * t[k]
            out[i, j] = acc
    return out_arr


def abs_diff_chanmean(a, b):
    cdef double[:, :, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, :, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t C = av.shape[0], H = av.shape[1], W = av.shape[2]
    out_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j
    cdef double d
    for c in range(C):
        for i in range(H):
            for j in range(W):
                d = av[c, i, j] - bv[c, i, j]
                if d < 0:
                    d = -d
                out[i, j] += d
    for i in range(H):
        for j in range(W):
            out[i, j] /= C
    return out_arr


def downsample_mask(mask, factor):
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t f = factor
    if f == 1:
        return np.asarray(m, dtype=bool).copy()
    cdef Py_ssize_t h = m.shape[0] // f, w = m.shape[1] // f
    out_arr = np.zeros((h, w), dtype=bool)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, di, dj, count
    for i in range(h):
        for j in range(w):
            count = 0
            for di in range(f):
                for dj in range(f):
                    if m[i * f + di, j * f + dj]:
                        count += 1
            out[i, j] = 1 if 2 * count >= f * f else 0
    return out_arr


def blend_masked(z, z0, mask):
    cdef double[:, :, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, :, ::1] z0v = np.ascontiguousarray(z0, dtype=np.float64)
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t C = zv.shape[0], H = zv.shape[1], W = zv.shape[2]
    out_arr = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c, i, j] = z0v[c, i, j] if m[i, j] else zv[c, i, j]
    return out_arr
