"""The numba and numpy kernel backends must agree with each other and with dense math."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bregnn import kernels
from bregnn.sparsegraph import SparseMatrix

BACKENDS = [kernels.numpy_backend]
if kernels.numba_backend is not None:
    BACKENDS.append(kernels.numba_backend)


@st.composite
def csr(draw, max_n=7):
    n = draw(st.integers(1, max_n))
    dense = draw(st.lists(st.lists(st.floats(-2, 2, allow_nan=False), min_size=n, max_size=n),
                          min_size=n, max_size=n))
    keep = draw(st.lists(st.lists(st.booleans(), min_size=n, max_size=n), min_size=n, max_size=n))
    a = np.array(dense) * np.array(keep)
    rows, cols = np.nonzero(np.array(keep))
    return SparseMatrix.from_coo(n, rows, cols, a[rows, cols]), a


def _both(name, *args):
    return [getattr(b, name)(*args) for b in BACKENDS]


@given(csr(), st.integers(1, 4), st.integers(0, 2**31))
def test_spmm_matches_dense(m, d, seed):
    mat, dense = m
    x = np.random.default_rng(seed).standard_normal((mat.n, d))
    for out in _both("csr_spmm", mat.row_ptr, mat.col_idx, mat.vals, x):
        np.testing.assert_allclose(out, dense @ x, atol=1e-12)
    for out in _both("csr_spmm_t", mat.row_ptr, mat.col_idx, mat.vals, x, mat.n):
        np.testing.assert_allclose(out, dense.T @ x, atol=1e-12)


@given(csr(), st.integers(1, 4), st.integers(0, 2**31))
def test_sddmm_matches_dense(m, d, seed):
    mat, _ = m
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((mat.n, d)), rng.standard_normal((mat.n, d))
    expected = np.einsum("ij,ij->i", a[mat.row_ids()], b[mat.col_idx])
    for out in _both("csr_sddmm", mat.row_ptr, mat.col_idx, a, b):
        np.testing.assert_allclose(out, expected, atol=1e-12)


@given(csr(), st.integers(0, 2**31))
def test_segment_softmax_backends_agree(m, seed):
    mat, _ = m
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(mat.nnz) * 5
    outs = _both("segment_softmax", mat.row_ptr, scores)
    for out in outs:
        sums = np.add.reduceat(out, mat.row_ptr[:-1][np.diff(mat.row_ptr) > 0]) if mat.nnz else []
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)
        np.testing.assert_allclose(out, outs[0], atol=1e-14)
    g = rng.standard_normal(mat.nnz)
    grads = _both("segment_softmax_backward", mat.row_ptr, outs[0], g)
    for out in grads:
        np.testing.assert_allclose(out, grads[0], atol=1e-13)


@given(st.integers(1, 6), st.integers(0, 12), st.integers(0, 2**31))
def test_scatter_add_rows(n, m, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=m)
    src = rng.standard_normal((m, 3))
    expected = np.zeros((n, 3))
    np.add.at(expected, idx, src)
    for out in _both("scatter_add_rows", idx, src, n):
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_kernel_names_exported_by_both_backends():
    for backend in BACKENDS:
        for name in kernels.KERNEL_NAMES:
            assert callable(getattr(backend, name))


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", None)])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, BREGNN_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from bregnn import kernels; print(kernels.BACKEND_NAME)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    if expected is None:
        expected = "numba" if kernels.numba_backend is not None else "numpy"
    assert out == expected
