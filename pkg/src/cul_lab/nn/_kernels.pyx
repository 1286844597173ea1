# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels (BLAS dgemm + fused SiLU). Mirrors ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void rm_gemm(char ta, char tb, int M, int N, int K,
                         double* A, int lda, double* B, int ldb,
                         double beta, double* C, int ldc) noexcept nogil:
    # Row-major C = op(A) @ op(B) via column-major dgemm on the transposes.
    cdef double one = 1.0
    dgemm(&tb, &ta, &N, &M, &K, &one, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void bias_silu(double* u, double* a, double* s, double* b,
                           int rows, int cols) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double x, sg
    for i in range(rows):
        for j in range(cols):
            k = i * cols + j
            x = u[k] + b[j]
            sg = 1.0 / (1.0 + exp(-x))
            u[k] = x
            s[k] = sg
            a[k] = x * sg


def mlp_forward(const double[::1] theta, X, int h1, int h2, int n_out):
    cdef double[:, ::1] Xc = np.ascontiguousarray(X, dtype=np.float64)
    cdef int B = Xc.shape[0]
    cdef int n_in = Xc.shape[1]
    cdef double* th = <double*>&theta[0]
    cdef double* W1 = th
    cdef double* b1 = W1 + n_in * h1
    cdef double* W2 = b1 + h1
    cdef double* b2 = W2 + h1 * h2
    cdef double* W3 = b2 + h2
    cdef double* b3 = W3 + h2 * n_out
    cdef double[:, ::1] u1 = np.empty((B, h1))
    cdef double[:, ::1] a1 = np.empty((B, h1))
    cdef double[:, ::1] s1 = np.empty((B, h1))
    cdef double[:, ::1] u2 = np.empty((B, h2))
    cdef double[:, ::1] a2 = np.empty((B, h2))
    cdef double[:, ::1] s2 = np.empty((B, h2))
    out = np.empty((B, n_out))
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    if B == 0:
        return out
    with nogil:
        rm_gemm(b'N', b'N', B, h1, n_in, &Xc[0, 0], n_in, W1, h1, 0.0, &u1[0, 0], h1)
        bias_silu(&u1[0, 0], &a1[0, 0], &s1[0, 0], b1, B, h1)
        rm_gemm(b'N', b'N', B, h2, h1, &a1[0, 0], h1, W2, h2, 0.0, &u2[0, 0], h2)
        bias_silu(&u2[0, 0], &a2[0, 0], &s2[0, 0], b2, B, h2)
        rm_gemm(b'N', b'N', B, n_out, h2, &a2[0, 0], h2, W3, n_out, 0.0, &y[0, 0], n_out)
        for i in range(B):
            for j in range(n_out):
                y[i, j] += b3[j]
    return out


def mlp_mse_grad(const double[::1] theta, X, target, int h1, int h2, int n_out):
    cdef double[:, ::1] Xc = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] tg = np.ascontiguousarray(target, dtype=np.float64)
    cdef int B = Xc.shape[0]
    cdef int n_in = Xc.shape[1]
    cdef double* th = <double*>&theta[0]
    cdef double* W1 = th
    cdef double* b1 = W1 + n_in * h1
    cdef double* W2 = b1 + h1
    cdef double* b2 = W2 + h1 * h2
    cdef double* W3 = b2 + h2
    cdef double* b3 = W3 + h2 * n_out

    grad_arr = np.zeros(theta.shape[0])
    cdef double[::1] grad = grad_arr
    cdef double* g = &grad[0]
    cdef double* gW1 = g
    cdef double* gb1 = gW1 + n_in * h1
    cdef double* gW2 = gb1 + h1
    cdef double* gb2 = gW2 + h1 * h2
    cdef double* gW3 = gb2 + h2
    cdef double* gb3 = gW3 + h2 * n_out

    cdef double[:, ::1] u1 = np.empty((B, h1))
    cdef double[:, ::1] a1 = np.empty((B, h1))
    cdef double[:, ::1] s1 = np.empty((B, h1))
    cdef double[:, ::1] u2 = np.empty((B, h2))
    cdef double[:, ::1] a2 = np.empty((B, h2))
    cdef double[:, ::1] s2 = np.empty((B, h2))
    cdef double[:, ::1] y = np.empty((B, n_out))
    cdef double[:, ::1] d2 = np.empty((B, h2))
    cdef double[:, ::1] d1 = np.empty((B, h1))
    cdef Py_ssize_t i, j
    cdef double r, loss = 0.0, scale = 2.0 / B, sg, x

    with nogil:
        rm_gemm(b'N', b'N', B, h1, n_in, &Xc[0, 0], n_in, W1, h1, 0.0, &u1[0, 0], h1)
        bias_silu(&u1[0, 0], &a1[0, 0], &s1[0, 0], b1, B, h1)
        rm_gemm(b'N', b'N', B, h2, h1, &a1[0, 0], h1, W2, h2, 0.0, &u2[0, 0], h2)
        bias_silu(&u2[0, 0], &a2[0, 0], &s2[0, 0], b2, B, h2)
        rm_gemm(b'N', b'N', B, n_out, h2, &a2[0, 0], h2, W3, n_out, 0.0, &y[0, 0], n_out)
        # y becomes dL/dy in place
        for i in range(B):
            for j in range(n_out):
                r = y[i, j] + b3[j] - tg[i, j]
                loss += r * r
                y[i, j] = scale * r
                gb3[j] += scale * r
        rm_gemm(b'T', b'N', h2, n_out, B, &a2[0, 0], h2, &y[0, 0], n_out, 0.0, gW3, n_out)
        rm_gemm(b'N', b'T', B, h2, n_out, &y[0, 0], n_out, W3, n_out, 0.0, &d2[0, 0], h2)
        for i in range(B):
            for j in range(h2):
                sg = s2[i, j]
                x = u2[i, j]
                d2[i, j] = d2[i, j] * sg * (1.0 + x * (1.0 - sg))
                gb2[j] += d2[i, j]
        rm_gemm(b'T', b'N', h1, h2, B, &a1[0, 0], h1, &d2[0, 0], h2, 0.0, gW2, h2)
        rm_gemm(b'N', b'T', B, h1, h2, &d2[0, 0], h2, W2, h2, 0.0, &d1[0, 0], h1)
        for i in range(B):
            for j in range(h1):
                sg = s1[i, j]
                x = u1[i, j]
                d1[i, j] = d1[i, j] * sg * (1.0 + x * (1.0 - sg))
                gb1[j] += d1[i, j]
        rm_gemm(b'T', b'N', n_in, h1, B, &Xc[0, 0], n_in, &d1[0, 0], h1, 0.0, gW1, h1)
    return loss / B, grad_arr
