"""Numpy implementations of the arithmetic kernels.

This module is the reference backend. `attnpop._kernels` (Cython) mirrors
the exact same surface; `attnpop.backend` picks one at import time. Every
function takes and returns C-contiguous float64 arrays.
"""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    return np.dot(a, b)


def matmul_nt(a, b):
    """a @ b.T"""
    return np.dot(a, b.T)


def matmul_tn(a, b):
    """a.T @ b"""
    return np.dot(a.T, b)


def matvec(a, x):
    return np.dot(a, x)


def vecmat(x, a):
    """x @ a for a row vector x."""
    return np.dot(x, a)


def outer(x, y):
    return np.outer(x, y)


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, g):
    return g * (1.0 - y * y)


def sigmoid_fwd(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, g):
    return g * y * (1.0 - y)


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(y, g):
    return np.where(y > 0.0, g, 0.0)


def softmax_fwd(x):
    shifted = x - x.max()
    e = np.exp(shifted)
    # summing in sorted order makes the normalizer independent of input
    # order, so permuting the input permutes the output bit-for-bit
    return e / np.sort(e).sum()


def softmax_bwd(y, g):
    return y * (g - float(np.dot(g, y)))
