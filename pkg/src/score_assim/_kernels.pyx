# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_kernels_py``.

The matrix products go through the BLAS shipped with SciPy; everything else
(bias, tanh, derivative masks, column sums) is fused into plain C loops so a
small-batch training step does not pay per-operation NumPy overhead.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef void _gemm(bint trans_a, bint trans_b, int m, int n, int k,
                double alpha, double *a, double *b, double beta, double *c) noexcept nogil:
    # Row-major C(m, n) = alpha * op(A)(m, k) @ op(B)(k, n) + beta * C, computed
    # as the column-major product C^T = op(B)^T op(A)^T.
    cdef char ta = b'T' if trans_b else b'N'
    cdef char tb = b'T' if trans_a else b'N'
    cdef int lda = k if trans_b else n
    cdef int ldb = m if trans_a else k
    cdef int ldc = n
    dgemm(&ta, &tb, &n, &m, &k, &alpha, b, &lda, a, &ldb, &beta, c, &ldc)


cdef inline Py_ssize_t _offsets(tuple dims, Py_ssize_t *off) except -1:
    cdef Py_ssize_t n_in = dims[0], h1 = dims[1], h2 = dims[2], n_out = dims[3]
    off[0] = 0
    off[1] = off[0] + n_in * h1
    off[2] = off[1] + h1
    off[3] = off[2] + h1 * h2
    off[4] = off[3] + h2
    off[5] = off[4] + h2 * n_out
    off[6] = off[5] + n_out
    return off[6]


cdef void _dense_tanh(double *x, double *w, double *bias, double *out,
                      int rows, int n_in, int n_out) noexcept nogil:
    cdef Py_ssize_t i, j
    _gemm(False, False, rows, n_out, n_in, 1.0, x, w, 0.0, out)
    for i in range(rows):
        for j in range(n_out):
            out[i * n_out + j] = tanh(out[i * n_out + j] + bias[j])


def mlp_forward_cache(double[::1] flat, tuple dims, x):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int rows = xv.shape[0]
    cdef int n_in = dims[0], h1 = dims[1], h2 = dims[2], n_out = dims[3]
    cdef Py_ssize_t off[7]
    if _offsets(dims, off) != flat.shape[0] or xv.shape[1] != n_in:
        raise ValueError("parameter vector or input does not match network dims")
    a1 = np.empty((rows, h1))
    a2 = np.empty((rows, h2))
    out = np.empty((rows, n_out))
    cdef double[:, ::1] a1v = a1, a2v = a2, ov = out
    cdef Py_ssize_t i, j
    cdef double *p = &flat[0]
    if rows == 0:
        return out, a1, a2
    with nogil:
        _dense_tanh(&xv[0, 0], p + off[0], p + off[1], &a1v[0, 0], rows, n_in, h1)
        _dense_tanh(&a1v[0, 0], p + off[2], p + off[3], &a2v[0, 0], rows, h1, h2)
        _gemm(False, False, rows, n_out, h2, 1.0, &a2v[0, 0], p + off[4], 0.0, &ov[0, 0])
        for i in range(rows):
            for j in range(n_out):
                ov[i, j] += p[off[5] + j]
    return out, a1, a2


def mlp_forward(double[::1] flat, tuple dims, x):
    return mlp_forward_cache(flat, dims, x)[0]


cdef void _colsum(double *m, double *out, int rows, int cols) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(cols):
        out[j] = 0.0
    for i in range(rows):
        for j in range(cols):
            out[j] += m[i * cols + j]


def mlp_backward(double[::1] flat, tuple dims, x, a1, a2, upstream):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] a1v = np.ascontiguousarray(a1, dtype=np.float64)
    cdef double[:, ::1] a2v = np.ascontiguousarray(a2, dtype=np.float64)
    cdef double[:, ::1] gv = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef int rows = xv.shape[0]
    cdef int n_in = dims[0], h1 = dims[1], h2 = dims[2], n_out = dims[3]
    cdef Py_ssize_t off[7]
    if _offsets(dims, off) != flat.shape[0]:
        raise ValueError("parameter vector does not match network dims")
    grad = np.zeros(flat.shape[0])
    if rows == 0:
        return grad
    d2 = np.empty((rows, h2))
    d1 = np.empty((rows, h1))
    cdef double[::1] gr = grad
    cdef double[:, ::1] d2v = d2, d1v = d1
    cdef double *p = &flat[0]
    cdef double *g = &gr[0]
    cdef Py_ssize_t i, j
    with nogil:
        _gemm(True, False, h2, n_out, rows, 1.0, &a2v[0, 0], &gv[0, 0], 0.0, g + off[4])
        _colsum(&gv[0, 0], g + off[5], rows, n_out)
        _gemm(False, True, rows, h2, n_out, 1.0, &gv[0, 0], p + off[4], 0.0, &d2v[0, 0])
        for i in range(rows):
            for j in range(h2):
                d2v[i, j] *= 1.0 - a2v[i, j] * a2v[i, j]
        _gemm(True, False, h1, h2, rows, 1.0, &a1v[0, 0], &d2v[0, 0], 0.0, g + off[2])
        _colsum(&d2v[0, 0], g + off[3], rows, h2)
        _gemm(False, True, rows, h1, h2, 1.0, &d2v[0, 0], p + off[2], 0.0, &d1v[0, 0])
        for i in range(rows):
            for j in range(h1):
                d1v[i, j] *= 1.0 - a1v[i, j] * a1v[i, j]
        _gemm(True, False, n_in, h1, rows, 1.0, &xv[0, 0], &d1v[0, 0], 0.0, g + off[0])
        _colsum(&d1v[0, 0], g + off[1], rows, h1)
    return grad


def systematic_resample(weights, double u):
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = w.shape[0]
    idx = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] iv = idx
    cdef Py_ssize_t m, j = 0, last = n - 1
    cdef double cum, pos
    if n == 0:
        return idx
    while last > 0 and w[last] <= 0.0:
        last -= 1
    cum = w[0]
    with nogil:
        for m in range(n):
            pos = (m + u) / n
            while cum <= pos and j < last:
                j += 1
                cum += w[j]
            iv[m] = j
    return idx


def lorenz96_drift(x, double forcing, bint damping):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], d = xv.shape[1]
    out = np.empty((rows, d))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, i
    with nogil:
        for r in range(rows):
            for i in range(d):
                ov[r, i] = (xv[r, (i + 1) % d] - xv[r, (i + d - 2) % d]) * xv[r, (i + d - 1) % d] + forcing
                if damping:
                    ov[r, i] -= xv[r, i]
    return out
