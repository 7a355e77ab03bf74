# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: im2col/col2im and batch-norm reductions in C loops, GEMM via BLAS.

Same signatures and semantics as ``_pykernels``. Reductions run in a fixed
order so results are bit-reproducible for a given BLAS.
"""
import numpy as np
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _rm_gemm(char ta, char tb, int m, int n, int k,
                          double* a, int lda, double* b, int ldb,
                          double beta, double* c, int ldc) noexcept nogil:
    # Row-major C = op(A) @ op(B) via column-major dgemm on the transposes.
    cdef double one = 1.0
    dgemm(&tb, &ta, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _im2col(double[:, :, ::1] x, int k, int pad, int l_out,
                  double[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t n, c, t, j, src
    cdef Py_ssize_t nb = x.shape[0], c_in = x.shape[1], length = x.shape[2]
    for n in range(nb):
        for t in range(l_out):
            for c in range(c_in):
                for j in range(k):
                    src = t + j - pad
                    if 0 <= src < length:
                        cols[n * l_out + t, c * k + j] = x[n, c, src]
                    else:
                        cols[n * l_out + t, c * k + j] = 0.0


def conv1d_forward(double[:, :, ::1] x, double[:, :, ::1] w, double[::1] b, int pad):
    cdef int nb = x.shape[0], c_in = x.shape[1], length = x.shape[2]
    cdef int c_out = w.shape[0], k = w.shape[2]
    cdef int l_out = length + 2 * pad - k + 1
    cdef int ck = c_in * k
    cols_arr = np.empty((nb * l_out, ck))
    mat_arr = np.empty((nb * l_out, c_out))
    out_arr = np.empty((nb, c_out, l_out))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] mat = mat_arr
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, t
    with nogil:
        _im2col(x, k, pad, l_out, cols)
        _rm_gemm(b'N', b'T', nb * l_out, c_out, ck, &cols[0, 0], ck,
                 &w[0, 0, 0], ck, 0.0, &mat[0, 0], c_out)
        for n in range(nb):
            for o in range(c_out):
                for t in range(l_out):
                    out[n, o, t] = mat[n * l_out + t, o] + b[o]
    return out_arr


cdef void _gout_rows(double[:, :, ::1] gout, double[:, ::1] g) noexcept nogil:
    # [N, C_out, L_out] -> [N * L_out, C_out]
    cdef Py_ssize_t n, o, t
    cdef Py_ssize_t nb = gout.shape[0], c_out = gout.shape[1], l_out = gout.shape[2]
    for n in range(nb):
        for o in range(c_out):
            for t in range(l_out):
                g[n * l_out + t, o] = gout[n, o, t]


def conv1d_weight_grad(double[:, :, ::1] x, double[:, :, ::1] gout, int pad):
    cdef int nb = x.shape[0], c_in = x.shape[1], length = x.shape[2]
    cdef int c_out = gout.shape[1], l_out = gout.shape[2]
    cdef int k = length + 2 * pad - l_out + 1
    cdef int ck = c_in * k
    cols_arr = np.empty((nb * l_out, ck))
    g_arr = np.empty((nb * l_out, c_out))
    gw_arr = np.empty((c_out, c_in, k))
    gb_arr = np.zeros(c_out)
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] g = g_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t o, row
    with nogil:
        _im2col(x, k, pad, l_out, cols)
        _gout_rows(gout, g)
        for row in range(nb * l_out):
            for o in range(c_out):
                gb[o] += g[row, o]
        _rm_gemm(b'T', b'N', c_out, ck, nb * l_out, &g[0, 0], c_out,
                 &cols[0, 0], ck, 0.0, &gw[0, 0, 0], ck)
    return gw_arr, gb_arr


def conv1d_input_grad(double[:, :, ::1] w, double[:, :, ::1] gout, int length, int pad):
    cdef int nb = gout.shape[0], c_out = gout.shape[1], l_out = gout.shape[2]
    cdef int c_in = w.shape[1], k = w.shape[2]
    cdef int ck = c_in * k
    g_arr = np.empty((nb * l_out, c_out))
    gcols_arr = np.empty((nb * l_out, ck))
    gx_arr = np.zeros((nb, c_in, length))
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] gcols = gcols_arr
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, t, c, j, dst
    with nogil:
        _gout_rows(gout, g)
        _rm_gemm(b'N', b'N', nb * l_out, ck, c_out, &g[0, 0], c_out,
                 &w[0, 0, 0], ck, 0.0, &gcols[0, 0], ck)
        for n in range(nb):
            for t in range(l_out):
                for c in range(c_in):
                    for j in range(k):
                        dst = t + j - pad
                        if 0 <= dst < length:
                            gx[n, c, dst] += gcols[n * l_out + t, c * k + j]
    return gx_arr


def conv1d_backward(double[:, :, ::1] x, double[:, :, ::1] w,
                    double[:, :, ::1] gout, int pad):
    gw, gb = conv1d_weight_grad(x, gout, pad)
    return conv1d_input_grad(w, gout, x.shape[2], pad), gw, gb


def batchnorm_forward(double[:, :, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t nb = x.shape[0], ch = x.shape[1], length = x.shape[2]
    cdef double m = <double>(nb * length)
    y_arr = np.empty((nb, ch, length))
    xhat_arr = np.empty((nb, ch, length))
    mean_arr = np.empty(ch)
    var_arr = np.empty(ch)
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef Py_ssize_t n, c, t
    cdef double acc, d, inv
    with nogil:
        for c in range(ch):
            acc = 0.0
            for n in range(nb):
                for t in range(length):
                    acc = acc + x[n, c, t]
            mean[c] = acc / m
            acc = 0.0
            for n in range(nb):
                for t in range(length):
                    d = x[n, c, t] - mean[c]
                    acc = acc + d * d
            var[c] = acc / m
            inv = 1.0 / sqrt(var[c] + eps)
            for n in range(nb):
                for t in range(length):
                    d = (x[n, c, t] - mean[c]) * inv
                    xhat[n, c, t] = d
                    y[n, c, t] = d * gamma[c] + beta[c]
    return y_arr, xhat_arr, mean_arr, var_arr


def batchnorm_backward(double[:, :, ::1] gout, double[:, :, ::1] xhat,
                       double[::1] gamma, double[::1] inv_std):
    cdef Py_ssize_t nb = gout.shape[0], ch = gout.shape[1], length = gout.shape[2]
    cdef double m = <double>(nb * length)
    gx_arr = np.empty((nb, ch, length))
    gg_arr = np.empty(ch)
    gbt_arr = np.empty(ch)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gbt = gbt_arr
    cdef Py_ssize_t n, c, t
    cdef double sg, sgx, scale
    with nogil:
        for c in range(ch):
            sg = 0.0
            sgx = 0.0
            for n in range(nb):
                for t in range(length):
                    sg = sg + gout[n, c, t]
                    sgx = sgx + gout[n, c, t] * xhat[n, c, t]
            gbt[c] = sg
            gg[c] = sgx
            scale = gamma[c] * inv_std[c] / m
            for n in range(nb):
                for t in range(length):
                    gx[n, c, t] = scale * (m * gout[n, c, t] - sg - xhat[n, c, t] * sgx)
    return gx_arr, gg_arr, gbt_arr
