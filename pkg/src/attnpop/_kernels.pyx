# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled arithmetic kernels, mirroring the surface of `_kernels_py`.

The tight loops beat numpy's per-call dispatch overhead at the small
array sizes this package works with. Matrix products above _BLAS_CUTOFF
multiply-adds are delegated back to numpy so large shapes keep BLAS speed.
"""

import numpy as np

from libc.math cimport exp, tanh

NAME = "compiled"

cdef Py_ssize_t _BLAS_CUTOFF = 32768


cdef inline double _sigmoid(double v) noexcept nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if m * k * n > _BLAS_CUTOFF:
        return np.dot(np.asarray(a), np.asarray(b))
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, p
    cdef double a_ip
    for i in range(m):
        for p in range(k):
            a_ip = a[i, p]
            for j in range(n):
                o[i, j] += a_ip * b[p, j]
    return out


def matmul_nt(const double[:, ::1] a, const double[:, ::1] b):
    """a @ b.T"""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    if m * k * n > _BLAS_CUTOFF:
        return np.dot(np.asarray(a), np.asarray(b).T)
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            o[i, j] = acc
    return out


def matmul_tn(const double[:, ::1] a, const double[:, ::1] b):
    """a.T @ b"""
    cdef Py_ssize_t m = a.shape[1], k = a.shape[0], n = b.shape[1]
    if m * k * n > _BLAS_CUTOFF:
        return np.dot(np.asarray(a).T, np.asarray(b))
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, p
    cdef double a_pi
    for p in range(k):
        for i in range(m):
            a_pi = a[p, i]
            for j in range(n):
                o[i, j] += a_pi * b[p, j]
    return out


def matvec(const double[:, ::1] a, const double[::1] x):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1]
    if m * k > _BLAS_CUTOFF:
        return np.dot(np.asarray(a), np.asarray(x))
    out = np.empty(m)
    cdef double[::1] o = out
    cdef Py_ssize_t i, p
    cdef double acc
    for i in range(m):
        acc = 0.0
        for p in range(k):
            acc += a[i, p] * x[p]
        o[i] = acc
    return out


def vecmat(const double[::1] x, const double[:, ::1] a):
    """x @ a for a row vector x."""
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    if m * n > _BLAS_CUTOFF:
        return np.dot(np.asarray(x), np.asarray(a))
    out = np.zeros(n)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double x_i
    for i in range(m):
        x_i = x[i]
        for j in range(n):
            o[j] += x_i * a[i, j]
    return out


def outer(const double[::1] x, const double[::1] y):
    cdef Py_ssize_t m = x.shape[0], n = y.shape[0]
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double x_i
    for i in range(m):
        x_i = x[i]
        for j in range(n):
            o[i, j] = x_i * y[j]
    return out


def tanh_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = tanh(x[i])
    return out


def tanh_bwd(const double[::1] y, const double[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = g[i] * (1.0 - y[i] * y[i])
    return out


def sigmoid_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _sigmoid(x[i])
    return out


def sigmoid_bwd(const double[::1] y, const double[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = g[i] * y[i] * (1.0 - y[i])
    return out


def relu_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = x[i] if x[i] > 0.0 else 0.0
    return out


def relu_bwd(const double[::1] y, const double[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = g[i] if y[i] > 0.0 else 0.0
    return out


def softmax_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i, j
    out = np.empty(n)
    scratch = np.empty(n)
    cdef double[::1] o = out
    cdef double[::1] s = scratch
    cdef double hi = x[0], total = 0.0, key
    for i in range(1, n):
        if x[i] > hi:
            hi = x[i]
    for i in range(n):
        o[i] = exp(x[i] - hi)
        s[i] = o[i]
    # insertion-sort the addends: summing in sorted order makes the
    # normalizer independent of input order, so permuting the input
    # permutes the output bit-for-bit
    for i in range(1, n):
        key = s[i]
        j = i - 1
        while j >= 0 and s[j] > key:
            s[j + 1] = s[j]
            j -= 1
        s[j + 1] = key
    for i in range(n):
        total += s[i]
    for i in range(n):
        o[i] /= total
    return out


def softmax_bwd(const double[::1] y, const double[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double dot = 0.0
    for i in range(n):
        dot += g[i] * y[i]
    for i in range(n):
        o[i] = y[i] * (g[i] - dot)
    return out
