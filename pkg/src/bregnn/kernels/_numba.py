"""Numba-compiled CSR kernels (see ``_numpy`` for the reference versions)."""

import numpy as np
from numba import njit


@njit(cache=True)
def csr_spmm(row_ptr, col_idx, vals, x):
    n = row_ptr.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        for e in range(row_ptr[i], row_ptr[i + 1]):
            w = vals[e]
            j = col_idx[e]
            for k in range(d):
                out[i, k] += w * x[j, k]
    return out


@njit(cache=True)
def csr_spmm_t(row_ptr, col_idx, vals, g, n_cols):
    n = row_ptr.shape[0] - 1
    d = g.shape[1]
    out = np.zeros((n_cols, d))
    for i in range(n):
        for e in range(row_ptr[i], row_ptr[i + 1]):
            w = vals[e]
            j = col_idx[e]
            for k in range(d):
                out[j, k] += w * g[i, k]
    return out


@njit(cache=True)
def csr_sddmm(row_ptr, col_idx, a, b):
    n = row_ptr.shape[0] - 1
    d = a.shape[1]
    out = np.empty(col_idx.shape[0])
    for i in range(n):
        for e in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[e]
            acc = 0.0
            for k in range(d):
                acc += a[i, k] * b[j, k]
            out[e] = acc
    return out


@njit(cache=True)
def segment_softmax(row_ptr, scores):
    n = row_ptr.shape[0] - 1
    out = np.empty_like(scores)
    for i in range(n):
        lo = row_ptr[i]
        hi = row_ptr[i + 1]
        if hi == lo:
            continue
        peak = scores[lo]
        for e in range(lo + 1, hi):
            if scores[e] > peak:
                peak = scores[e]
        total = 0.0
        for e in range(lo, hi):
            out[e] = np.exp(scores[e] - peak)
            total += out[e]
        for e in range(lo, hi):
            out[e] /= total
    return out


@njit(cache=True)
def segment_softmax_backward(row_ptr, alpha, grad):
    n = row_ptr.shape[0] - 1
    out = np.empty_like(alpha)
    for i in range(n):
        lo = row_ptr[i]
        hi = row_ptr[i + 1]
        dot = 0.0
        for e in range(lo, hi):
            dot += alpha[e] * grad[e]
        for e in range(lo, hi):
            out[e] = alpha[e] * (grad[e] - dot)
    return out


@njit(cache=True)
def scatter_add_rows(idx, src, n):
    out = np.zeros((n, src.shape[1]))
    for r in range(idx.shape[0]):
        t = idx[r]
        for k in range(src.shape[1]):
            out[t, k] += src[r, k]
    return out
