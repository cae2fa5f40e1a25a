# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled depthwise 3x3 kernels. Same contract as ``_pykernels``."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def _forward(real[:, :, :, ::1] x, real[:, :, ::1] k, real[::1] bias,
             real[:, :, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, a, e, ii, jj
    cdef real acc
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        acc = 0
                        for a in range(3):
                            ii = i + a - 1
                            if ii < 0 or ii >= H:
                                continue
                            for e in range(3):
                                jj = j + e - 1
                                if jj < 0 or jj >= W:
                                    continue
                                acc = acc + k[c, a, e] * x[b, c, ii, jj]
                        out[b, c, i, j] = acc + bias[c]


def _backward(real[:, :, :, ::1] x, real[:, :, ::1] k, real[:, :, :, ::1] g,
              real[:, :, :, ::1] gx, real[:, :, ::1] gk, real[::1] gb):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, a, e, ii, jj
    cdef real gv
    with nogil:
        for c in range(C):
            for b in range(B):
                for i in range(H):
                    for j in range(W):
                        gv = g[b, c, i, j]
                        gb[c] = gb[c] + gv
                        for a in range(3):
                            ii = i + a - 1
                            if ii < 0 or ii >= H:
                                continue
                            for e in range(3):
                                jj = j + e - 1
                                if jj < 0 or jj >= W:
                                    continue
                                gk[c, a, e] = gk[c, a, e] + gv * x[b, c, ii, jj]
                                gx[b, c, ii, jj] = gx[b, c, ii, jj] + gv * k[c, a, e]


def dwconv3x3_forward(x, kernel, bias):
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    out = np.empty_like(x)
    _forward(x, kernel, bias, out)
    return out


def dwconv3x3_backward(x, kernel, grad_out):
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    grad_out = np.ascontiguousarray(grad_out, dtype=x.dtype)
    gx = np.zeros_like(x)
    gk = np.zeros_like(kernel)
    gb = np.zeros(x.shape[1], dtype=x.dtype)
    _backward(x, kernel, grad_out, gx, gk, gb)
    return gx, gk, gb
