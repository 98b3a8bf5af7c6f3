"""Sparse graph kernels with a numba fast path.

The backend is chosen once at import time. Set ``BREGNN_DISABLE_NUMBA=1`` to
force the pure-numpy implementations (useful when numba is unavailable or
when debugging). Both backends stay importable as ``numpy_backend`` and
``numba_backend`` for comparison tests and the benchmark script.
"""

import os

import numpy as np

from . import _numpy as numpy_backend

KERNEL_NAMES = (
    "csr_spmm",
    "csr_spmm_t",
    "csr_sddmm",
    "segment_softmax",
    "segment_softmax_backward",
    "scatter_add_rows",
)


def _numba_wanted():
    flag = os.environ.get("BREGNN_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None

if numba_backend is not None and _numba_wanted():
    backend = numba_backend
    BACKEND_NAME = "numba"
else:
    backend = numpy_backend
    BACKEND_NAME = "numpy"


def _as_inputs(row_ptr, col_idx):
    return np.ascontiguousarray(row_ptr, dtype=np.int64), np.ascontiguousarray(col_idx, dtype=np.int64)


def csr_spmm(row_ptr, col_idx, vals, x):
    """Sparse (CSR) times dense: ``out[i] = sum_e vals[e] * x[col_idx[e]]``."""
    row_ptr, col_idx = _as_inputs(row_ptr, col_idx)
    return backend.csr_spmm(row_ptr, col_idx, np.ascontiguousarray(vals, dtype=np.float64),
                            np.ascontiguousarray(x, dtype=np.float64))


def csr_spmm_t(row_ptr, col_idx, vals, g, n_cols):
    """Transposed sparse times dense, without materializing the transpose."""
    row_ptr, col_idx = _as_inputs(row_ptr, col_idx)
    return backend.csr_spmm_t(row_ptr, col_idx, np.ascontiguousarray(vals, dtype=np.float64),
                              np.ascontiguousarray(g, dtype=np.float64), int(n_cols))


def csr_sddmm(row_ptr, col_idx, a, b):
    """Per stored entry ``(i, j)``: the dot product ``a[i] . b[j]``."""
    row_ptr, col_idx = _as_inputs(row_ptr, col_idx)
    return backend.csr_sddmm(row_ptr, col_idx, np.ascontiguousarray(a, dtype=np.float64),
                             np.ascontiguousarray(b, dtype=np.float64))


def segment_softmax(row_ptr, scores):
    """Softmax of ``scores`` within each CSR row segment."""
    row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
    return backend.segment_softmax(row_ptr, np.ascontiguousarray(scores, dtype=np.float64))


def segment_softmax_backward(row_ptr, alpha, grad):
    row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
    return backend.segment_softmax_backward(row_ptr, np.ascontiguousarray(alpha, dtype=np.float64),
                                            np.ascontiguousarray(grad, dtype=np.float64))


def scatter_add_rows(idx, src, n):
    """``out[idx[r]] += src[r]`` for every row r of ``src``."""
    return backend.scatter_add_rows(np.ascontiguousarray(idx, dtype=np.int64),
                                    np.ascontiguousarray(src, dtype=np.float64), int(n))
