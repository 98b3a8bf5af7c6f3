"""Pure-numpy versions of the CSR kernels.

Each function mirrors the signature of its counterpart in ``_numba`` and must
return identical results up to floating-point summation order.
"""

import numpy as np


def _row_ids(row_ptr):
    return np.repeat(np.arange(len(row_ptr) - 1), np.diff(row_ptr))


def _segment_reduce(ufunc, values, row_ptr, fill):
    # reduceat misbehaves on empty segments, so only reduce the non-empty ones
    n = len(row_ptr) - 1
    out = np.full((n,) + values.shape[1:], fill, dtype=values.dtype)
    counts = np.diff(row_ptr)
    nonempty = counts > 0
    if values.shape[0]:
        out[nonempty] = ufunc.reduceat(values, row_ptr[:-1][nonempty], axis=0)
    return out


def csr_spmm(row_ptr, col_idx, vals, x):
    contrib = vals[:, None] * x[col_idx]
    return _segment_reduce(np.add, contrib, row_ptr, 0.0)


def csr_spmm_t(row_ptr, col_idx, vals, g, n_cols):
    rows = _row_ids(row_ptr)
    order = np.argsort(col_idx, kind="stable")
    sorted_cols = col_idx[order]
    ptr = np.searchsorted(sorted_cols, np.arange(n_cols + 1))
    contrib = vals[order, None] * g[rows[order]]
    return _segment_reduce(np.add, contrib, ptr, 0.0)


def csr_sddmm(row_ptr, col_idx, a, b):
    rows = _row_ids(row_ptr)
    return np.einsum("ij,ij->i", a[rows], b[col_idx])


def segment_softmax(row_ptr, scores):
    if scores.shape[0] == 0:
        return scores.copy()
    counts = np.diff(row_ptr)
    peak = _segment_reduce(np.maximum, scores, row_ptr, 0.0)
    ex = np.exp(scores - np.repeat(peak, counts))
    total = _segment_reduce(np.add, ex, row_ptr, 1.0)
    return ex / np.repeat(total, counts)


def segment_softmax_backward(row_ptr, alpha, grad):
    if alpha.shape[0] == 0:
        return alpha.copy()
    dot = _segment_reduce(np.add, alpha * grad, row_ptr, 0.0)
    return alpha * (grad - np.repeat(dot, np.diff(row_ptr)))


def scatter_add_rows(idx, src, n):
    out = np.zeros((n, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out
