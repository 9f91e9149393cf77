# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tiled-convolution kernels.

Same contracts as ``_kernels_py``. Each tiling of each image is gathered
into an im2col buffer and multiplied against the tiling's kernel bank with
BLAS ``dgemm``.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _im2col(const double[:, ::1] img, int t, int k, int m, double* col) noexcept nogil:
    # col is (m*m, k*k) row-major
    cdef int r, c, i, j, row0, col0
    cdef int kk = k * k
    cdef double* dst
    for r in range(m):
        row0 = t + r * k
        for c in range(m):
            col0 = t + c * k
            dst = col + (r * m + c) * kk
            for i in range(k):
                for j in range(k):
                    dst[i * k + j] = img[row0 + i, col0 + j]


cdef inline void _col2im_add(double[:, ::1] img, int t, int k, int m, const double* col) noexcept nogil:
    cdef int r, c, i, j, row0, col0
    cdef int kk = k * k
    cdef const double* src
    for r in range(m):
        row0 = t + r * k
        for c in range(m):
            col0 = t + c * k
            src = col + (r * m + c) * kk
            for i in range(k):
                for j in range(k):
                    img[row0 + i, col0 + j] += src[i * k + j]


def forward(const double[:, :, ::1] v, const double[:, :, :, ::1] w, int m):
    cdef int nb = v.shape[0]
    cdef int nt = w.shape[0], nf = w.shape[1], k = w.shape[2]
    cdef int p = m * m, kk = k * k
    out_arr = np.empty((nb, nt, nf, m, m))
    cdef double[:, :, :, :, ::1] out = out_arr
    if nb == 0 or nf == 0:
        return out_arr
    cdef double* col = <double*> malloc(p * kk * sizeof(double))
    cdef double one = 1.0, zero = 0.0
    cdef char ta = b'T', tb = b'N'
    cdef int b, t
    with nogil:
        for b in range(nb):
            for t in range(nt):
                _im2col(v[b], t, k, m, col)
                # out[b, t] (F x P, row-major) = W[t] (F x K) . col^T (K x P)
                dgemm(&ta, &tb, &p, &nf, &kk, &one, col, &kk,
                      <double*> &w[t, 0, 0, 0], &kk, &zero, &out[b, t, 0, 0, 0], &p)
    free(col)
    return out_arr


def adjoint(const double[:, :, :, :, ::1] c, const double[:, :, :, ::1] w, int height, int width):
    cdef int nb = c.shape[0], nt = c.shape[1], nf = c.shape[2], m = c.shape[3]
    cdef int k = w.shape[2]
    cdef int p = m * m, kk = k * k
    out_arr = np.zeros((nb, height, width))
    cdef double[:, :, ::1] out = out_arr
    if nb == 0 or nf == 0:
        return out_arr
    cdef double* col = <double*> malloc(p * kk * sizeof(double))
    cdef double one = 1.0, zero = 0.0
    cdef char ta = b'N', tb = b'T'
    cdef int b, t
    with nogil:
        for b in range(nb):
            for t in range(nt):
                # col^T (K x P, col-major) = W[t]^T (K x F) . c[b, t] (F x P)
                dgemm(&ta, &tb, &kk, &p, &nf, &one, <double*> &w[t, 0, 0, 0], &kk,
                      <double*> &c[b, t, 0, 0, 0], &p, &zero, col, &kk)
                _col2im_add(out[b], t, k, m, col)
    free(col)
    return out_arr


def weight_grad(const double[:, :, ::1] v, const double[:, :, :, :, ::1] c, int k):
    cdef int nb = c.shape[0], nt = c.shape[1], nf = c.shape[2], m = c.shape[3]
    cdef int p = m * m, kk = k * k
    out_arr = np.zeros((nt, nf, k, k))
    cdef double[:, :, :, ::1] out = out_arr
    if nb == 0 or nf == 0:
        return out_arr
    cdef double* col = <double*> malloc(p * kk * sizeof(double))
    cdef double one = 1.0
    cdef char ta = b'N', tb = b'N'
    cdef int b, t
    with nogil:
        for t in range(nt):
            for b in range(nb):
                _im2col(v[b], t, k, m, col)
                # G^T (K x F, col-major) += col^T (K x P) . c[b, t]^T (P x F)
                dgemm(&ta, &tb, &kk, &nf, &p, &one, col, &kk,
                      <double*> &c[b, t, 0, 0, 0], &p, &one, &out[t, 0, 0, 0], &kk)
    free(col)
    return out_arr


def field_sumsq(const double[:, :, ::1] v, int nt, int k, int m):
    cdef int nb = v.shape[0]
    out_arr = np.empty((nb, nt, m, m))
    cdef double[:, :, :, ::1] out = out_arr
    cdef int b, t, r, c, i, j, row0, col0
    cdef double acc, x
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for r in range(m):
                    row0 = t + r * k
                    for c in range(m):
                        col0 = t + c * k
                        acc = 0.0
                        for i in range(k):
                            for j in range(k):
                                x = v[b, row0 + i, col0 + j]
                                acc = acc + x * x
                        out[b, t, r, c] = acc
    return out_arr


def field_scatter(const double[:, :, :, ::1] c, int height, int width, int k):
    cdef int nb = c.shape[0], nt = c.shape[1], m = c.shape[2]
    out_arr = np.zeros((nb, height, width))
    cdef double[:, :, ::1] out = out_arr
    cdef int b, t, r, cc, i, j, row0, col0
    cdef double val
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for r in range(m):
                    row0 = t + r * k
                    for cc in range(m):
                        col0 = t + cc * k
                        val = c[b, t, r, cc]
                        for i in range(k):
                            for j in range(k):
                                out[b, row0 + i, col0 + j] += val
    return out_arr
