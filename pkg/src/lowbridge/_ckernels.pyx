# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Every function here has a numpy twin in ``_pykernels``
with identical signature and results; ``lowbridge._backend`` picks one."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY
from libc.stdint cimport uint64_t, uint8_t, int64_t

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t n_out) nogil:
    # one past the largest o < n_out with o * stride + offset < size
    cdef Py_ssize_t last = size - 1 - offset
    if last < 0:
        return 0
    return min(n_out, last // stride + 1)


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, row, y0, y1, x0, x1
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    y0, y1 = _first_valid(i - pad, stride), _end_valid(i - pad, stride, H, Ho)
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        x0, x1 = _first_valid(j - pad, stride), _end_valid(j - pad, stride, W, Wo)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                cols[n, row, oy * Wo + ox] = x[n, c, iy, ox * stride + j - pad]
    return out


def col2im(real[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, row, y0, y1, x0, x1
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    y0, y1 = _first_valid(i - pad, stride), _end_valid(i - pad, stride, H, Ho)
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        x0, x1 = _first_valid(j - pad, stride), _end_valid(j - pad, stride, W, Wo)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            for ox in range(x0, x1):
                                dx[n, c, iy, ox * stride + j - pad] += cols[n, row, oy * Wo + ox]
    return out


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, C, Ho, Wo), dtype=dtype)
    arg = np.empty((N, C, Ho, Wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] o = out
    cdef uint8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, c, y, xx
    cdef real best, v
    cdef uint8_t k
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        best = x[n, c, 2 * y, 2 * xx]
                        k = 0
                        v = x[n, c, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[n, c, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[n, c, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[n, c, y, xx] = best
                        a[n, c, y, xx] = k
    return out, arg


def maxpool2x2_backward(real[:, :, :, ::1] grad, uint8_t[:, :, :, ::1] arg):
    cdef Py_ssize_t N = grad.shape[0], C = grad.shape[1], Ho = grad.shape[2], Wo = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, y, xx
    cdef uint8_t k
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        k = arg[n, c, y, xx]
                        dx[n, c, 2 * y + (k >> 1), 2 * xx + (k & 1)] = grad[n, c, y, xx]
    return out


def nms(double[:, ::1] mag, cnp.int8_t[:, ::1] bins):
    cdef Py_ssize_t H = mag.shape[0], W = mag.shape[1]
    out = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t y, x
    cdef int dy, dx
    cdef double m
    with nogil:
        for y in range(1, H - 1):
            for x in range(1, W - 1):
                m = mag[y, x]
                if bins[y, x] == 0:
                    dy = 0
                    dx = 1
                elif bins[y, x] == 1:
                    dy = 1
                    dx = 1
                elif bins[y, x] == 2:
                    dy = 1
                    dx = 0
                else:
                    dy = 1
                    dx = -1
                if m >= mag[y + dy, x + dx] and m >= mag[y - dy, x - dx]:
                    o[y, x] = m
    return out


def hysteresis(double[:, ::1] sup, double low, double high):
    cdef Py_ssize_t H = sup.shape[0], W = sup.shape[1]
    out = np.zeros((H, W), dtype=np.uint8)
    cdef uint8_t[:, ::1] e = out
    stack_arr = np.empty(H * W, dtype=np.int64)
    cdef int64_t[::1] stack = stack_arr
    cdef Py_ssize_t top = 0, y, x, p, py, px, ny, nx
    cdef int oy, ox
    with nogil:
        for y in range(H):
            for x in range(W):
                if sup[y, x] >= high and e[y, x] == 0:
                    e[y, x] = 1
                    stack[top] = y * W + x
                    top += 1
                    while top > 0:
                        top -= 1
                        p = stack[top]
                        py = p // W
                        px = p - py * W
                        for oy in range(-1, 2):
                            ny = py + oy
                            if ny < 0 or ny >= H:
                                continue
                            for ox in range(-1, 2):
                                nx = px + ox
                                if nx < 0 or nx >= W:
                                    continue
                                if e[ny, nx] == 0 and sup[ny, nx] >= low:
                                    e[ny, nx] = 1
                                    stack[top] = ny * W + nx
                                    top += 1
    return out


def min_distances(cnp.int64_t[:, ::1] a, cnp.int64_t[:, ::1] b, double sy, double sx):
    """For each row of ``a``, the spacing-scaled Euclidean distance to its nearest row of ``b``."""
    cdef Py_ssize_t M = a.shape[0], K = b.shape[0], i, j
    out = np.empty(M, dtype=np.float64)
    cdef double[::1] o = out
    cdef double best, dy, dx, d2
    with nogil:
        for i in range(M):
            best = INFINITY
            for j in range(K):
                dy = (a[i, 0] - b[j, 0]) * sy
                dx = (a[i, 1] - b[j, 1]) * sx
                d2 = dy * dy + dx * dx
                if d2 < best:
                    best = d2
            o[i] = sqrt(best)
    return out


cdef uint64_t _CRC_TABLE[256]
cdef bint _crc_ready = False


cdef void _init_crc_table():
    global _crc_ready
    cdef uint64_t poly = 0xC96C5795D7870F42ULL, c
    cdef int i, k
    for i in range(256):
        c = <uint64_t>i
        for k in range(8):
            if c & 1:
                c = (c >> 1) ^ poly
            else:
                c = c >> 1
        _CRC_TABLE[i] = c
    _crc_ready = True


def crc64(const unsigned char[::1] data, uint64_t crc=0):
    """CRC-64/XZ. ``crc`` continues a previous call's result."""
    if not _crc_ready:
        _init_crc_table()
    cdef uint64_t c = crc ^ 0xFFFFFFFFFFFFFFFFULL
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            c = _CRC_TABLE[(c ^ data[i]) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFFFFFFFFFFULL
