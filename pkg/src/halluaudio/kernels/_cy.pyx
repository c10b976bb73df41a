# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the convolution, pooling, norm and ReLU layers.

Every routine has a NumPy twin in ``_numpy.py``. Unfold, pool and ReLU
agree bit for bit; batch-norm sums may differ in the last ulp.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col3x3(floating[:, :, :, ::1] x):
    """Unfold 3x3 same-padded patches into (B, C*9, H*W) columns."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, ky, kx, i, j, i0, i1, j0, j1, dy, dx
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C * 9, H * W), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    cdef floating *dst
    cdef floating *src
    for b in range(B):
        for c in range(C):
            for ky in range(3):
                dy = ky - 1
                i0 = 1 if dy < 0 else 0
                i1 = H - 1 if dy > 0 else H
                for kx in range(3):
                    dx = kx - 1
                    j0 = 1 if dx < 0 else 0
                    j1 = W - 1 if dx > 0 else W
                    for i in range(i0, i1):
                        dst = &o[b, c * 9 + ky * 3 + kx, i * W]
                        src = &x[b, c, i + dy, 0]
                        for j in range(j0, j1):
                            dst[j] = src[j + dx]
    return out


def col2im3x3(floating[:, :, ::1] cols, Py_ssize_t H, Py_ssize_t W):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to (B, C, H, W)."""
    cdef Py_ssize_t B = cols.shape[0], C = cols.shape[1] // 9
    cdef Py_ssize_t b, c, ky, kx, i, j, i0, i1, j0, j1, dy, dx
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating *dst
    cdef floating *src
    for b in range(B):
        for c in range(C):
            for ky in range(3):
                dy = ky - 1
                i0 = 1 if dy < 0 else 0
                i1 = H - 1 if dy > 0 else H
                for kx in range(3):
                    dx = kx - 1
                    j0 = 1 if dx < 0 else 0
                    j1 = W - 1 if dx > 0 else W
                    for i in range(i0, i1):
                        src = &cols[b, c * 9 + ky * 3 + kx, i * W]
                        dst = &o[b, c, i + dy, 0]
                        for j in range(j0, j1):
                            dst[j + dx] += src[j]
    return out


def maxpool4_forward(floating[:, :, :, ::1] x):
    """4x4/stride-4 max pool. Returns (out, idx) with idx in 0..15, first max wins."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 4, Wo = x.shape[3] // 4
    cdef Py_ssize_t b, c, i, j, di, dj
    cdef floating best, v
    cdef unsigned char arg
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C, Ho, Wo), dtype=dtype)
    idx = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    cdef floating[:, :, :, ::1] o = out
    cdef unsigned char[:, :, :, ::1] a = idx
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[b, c, 4 * i, 4 * j]
                    arg = 0
                    for di in range(4):
                        for dj in range(4):
                            v = x[b, c, 4 * i + di, 4 * j + dj]
                            if v > best:
                                best = v
                                arg = <unsigned char>(di * 4 + dj)
                    o[b, c, i, j] = best
                    a[b, c, i, j] = arg
    return out, idx


def maxpool4_backward(floating[:, :, :, ::1] dout, unsigned char[:, :, :, ::1] idx,
                      Py_ssize_t H, Py_ssize_t W):
    """Route each upstream gradient to the recorded argmax position."""
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef unsigned char k
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = idx[b, c, i, j]
                    o[b, c, 4 * i + k // 4, 4 * j + k % 4] = dout[b, c, i, j]
    return out


def bn_stats(floating[:, :, ::1] x):
    """Per-channel mean and biased variance of a (B, C, N) view, float64."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t b, c, i
    cdef double s, d, m, cnt = <double>(B * N)
    mean = np.empty(C, dtype=np.float64)
    var = np.empty(C, dtype=np.float64)
    cdef double[::1] mv = mean, vv = var
    for c in range(C):
        s = 0.0
        for b in range(B):
            for i in range(N):
                s += x[b, c, i]
        m = s / cnt
        s = 0.0
        for b in range(B):
            for i in range(N):
                d = x[b, c, i] - m
                s += d * d
        mv[c] = m
        vv[c] = s / cnt
    return mean, var


def bn_normalize(floating[:, :, ::1] x, double[::1] mean, double[::1] inv,
                 floating[::1] gamma, floating[::1] beta):
    """xhat = (x - mean) * inv and y = gamma * xhat + beta, in one pass."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t b, c, i
    cdef double m, s, g, be, h
    dtype = np.float32 if floating is float else np.float64
    xhat = np.empty((B, C, N), dtype=dtype)
    y = np.empty((B, C, N), dtype=dtype)
    cdef floating[:, :, ::1] hv = xhat, yv = y
    for b in range(B):
        for c in range(C):
            m = mean[c]
            s = inv[c]
            g = gamma[c]
            be = beta[c]
            for i in range(N):
                h = (x[b, c, i] - m) * s
                hv[b, c, i] = <floating>h
                yv[b, c, i] = <floating>(g * h + be)
    return xhat, y


def bn_backward(floating[:, :, ::1] dout, floating[:, :, ::1] xhat, floating[::1] gamma, double[::1] inv):
    """Returns (dx, dgamma, dbeta) for training-mode batch norm."""
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], N = dout.shape[2]
    cdef Py_ssize_t b, c, i
    cdef double s1, s2, k, n = <double>(B * N)
    dtype = np.float32 if floating is float else np.float64
    dx = np.empty((B, C, N), dtype=dtype)
    dgamma = np.empty(C, dtype=dtype)
    dbeta = np.empty(C, dtype=dtype)
    cdef floating[:, :, ::1] dv = dx
    for c in range(C):
        s1 = 0.0
        s2 = 0.0
        for b in range(B):
            for i in range(N):
                s1 += dout[b, c, i]
                s2 += dout[b, c, i] * xhat[b, c, i]
        dgamma[c] = s2
        dbeta[c] = s1
        k = gamma[c] * inv[c] / n
        for b in range(B):
            for i in range(N):
                dv[b, c, i] = <floating>(k * (n * dout[b, c, i] - s1 - xhat[b, c, i] * s2))
    return dx, dgamma, dbeta


def relu_forward(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    dtype = np.float32 if floating is float else np.float64
    y = np.empty(n, dtype=dtype)
    cdef floating[::1] yv = y
    cdef floating *src = &x[0] if n else NULL
    cdef floating *dst = &yv[0] if n else NULL
    cdef floating v
    for i in range(n):
        v = src[i]
        dst[i] = v if v > 0 else 0
    return y


def relu_backward(floating[::1] dout, floating[::1] y):
    cdef Py_ssize_t i, n = dout.shape[0]
    dtype = np.float32 if floating is float else np.float64
    dx = np.empty(n, dtype=dtype)
    cdef floating[::1] dv = dx
    cdef floating *g = &dout[0] if n else NULL
    cdef floating *yy = &y[0] if n else NULL
    cdef floating *dst = &dv[0] if n else NULL
    for i in range(n):
        dst[i] = g[i] * (yy[i] > 0)
    return dx
