# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence kernels.

Same contract as ``_kernels_py``: gate layout ``[input | forget | output |
candidate]``, row-major ``[B, T, *]`` arrays, float32 or float64.  The
recurrent matrix products go through the BLAS shipped with scipy.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, tanh, tanhf
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline real _sigmoid(real x) noexcept nogil:
    cdef real e
    if real is float:
        if x >= 0:
            return 1.0 / (1.0 + expf(-x))
        e = expf(x)
        return e / (1.0 + e)
    else:
        if x >= 0:
            return 1.0 / (1.0 + exp(-x))
        e = exp(x)
        return e / (1.0 + e)


cdef inline real _tanh(real x) noexcept nogil:
    if real is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef void _gemm(char *ta, char *tb, int m, int n, int k, real alpha,
                real *a, int lda, real *b, int ldb, real beta,
                real *c, int ldc) noexcept nogil:
    if real is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


# Row-major C[m, n] = A[m, k] @ B[k, n] maps to column-major C^T = B^T A^T.
cdef inline void _rm_matmul(real *a, int lda, real *b, int ldb, real *c, int ldc,
                            int m, int n, int k, real beta) noexcept nogil:
    _gemm(b"N", b"N", n, m, k, 1.0, b, ldb, a, lda, beta, c, ldc)


cdef void _forward(real[:, :, ::1] gx, real[:, ::1] w_h, real[:, :, ::1] hs,
                   real[:, :, ::1] cs, real[:, :, ::1] tcs, real[:, :, ::1] acts,
                   real[:, ::1] z) noexcept nogil:
    cdef int bsz = gx.shape[0]
    cdef int t_len = gx.shape[1]
    cdef int h4 = gx.shape[2]
    cdef int h = h4 // 4
    cdef int b, t, j
    cdef real c, cp
    for t in range(t_len):
        if t == 0:
            for b in range(bsz):
                for j in range(h4):
                    z[b, j] = gx[b, 0, j]
        else:
            for b in range(bsz):
                for j in range(h4):
                    z[b, j] = gx[b, t, j]
            # z += h_{t-1} @ w_h; hs rows are strided by T*h
            _rm_matmul(&hs[0, t - 1, 0], t_len * h, &w_h[0, 0], h4, &z[0, 0], h4,
                       bsz, h4, h, 1.0)
        for b in range(bsz):
            for j in range(3 * h):
                acts[b, t, j] = _sigmoid(z[b, j])
            for j in range(3 * h, h4):
                acts[b, t, j] = _tanh(z[b, j])
            for j in range(h):
                cp = cs[b, t - 1, j] if t > 0 else 0.0
                c = acts[b, t, h + j] * cp + acts[b, t, j] * acts[b, t, 3 * h + j]
                cs[b, t, j] = c
                tcs[b, t, j] = _tanh(c)
                hs[b, t, j] = acts[b, t, 2 * h + j] * tcs[b, t, j]


cdef void _backward(real[:, :, ::1] d_hs, real[:, :, ::1] cs, real[:, :, ::1] tcs,
                    real[:, :, ::1] acts,
                    real[:, ::1] w_h, real[:, :, ::1] d_gates, real[:, ::1] dh_next,
                    real[:, ::1] dc_next, real[::1] zeros) noexcept nogil:
    cdef int bsz = cs.shape[0]
    cdef int t_len = cs.shape[1]
    cdef int h = cs.shape[2]
    cdef int h4 = 4 * h
    cdef int b, t, j
    cdef real ig, fg, og, gg, tc, dh, dc
    cdef real *cp
    cdef real *tcc
    cdef real *a
    cdef real *dz
    cdef real *dhs
    cdef real *dhn
    cdef real *dcn
    for t in range(t_len - 1, -1, -1):
        for b in range(bsz):
            cp = &cs[b, t - 1, 0] if t > 0 else &zeros[0]
            tcc = &tcs[b, t, 0]
            a = &acts[b, t, 0]
            dz = &d_gates[b, t, 0]
            dhs = &d_hs[b, t, 0]
            dhn = &dh_next[b, 0]
            dcn = &dc_next[b, 0]
            for j in range(h):
                ig = a[j]
                fg = a[h + j]
                og = a[2 * h + j]
                gg = a[3 * h + j]
                tc = tcc[j]
                dh = dhs[j] + dhn[j]
                dc = dcn[j] + dh * og * (1 - tc * tc)
                dz[j] = dc * gg * ig * (1 - ig)
                dz[h + j] = dc * cp[j] * fg * (1 - fg)
                dz[2 * h + j] = dh * tc * og * (1 - og)
                dz[3 * h + j] = dc * ig * (1 - gg * gg)
                dcn[j] = dc * fg
        # dh_next = dz_t @ w_h^T  (row-major [B, 4h] @ [4h, h])
        _gemm(b"T", b"N", h, bsz, h4, 1.0, &w_h[0, 0], h4, &d_gates[0, t, 0],
              t_len * h4, 0.0, &dh_next[0, 0], h)


def lstm_forward(gates_x, w_h):
    gates_x = np.ascontiguousarray(gates_x)
    w_h = np.ascontiguousarray(w_h, dtype=gates_x.dtype)
    bsz, t_len, h4 = gates_x.shape
    h = h4 // 4
    hs = np.empty((bsz, t_len, h), dtype=gates_x.dtype)
    cs = np.empty((bsz, t_len, h), dtype=gates_x.dtype)
    acts = np.empty((bsz, t_len, h4), dtype=gates_x.dtype)
    tcs = np.empty((bsz, t_len, h), dtype=gates_x.dtype)
    z = np.empty((bsz, h4), dtype=gates_x.dtype)
    if gates_x.dtype == np.float64:
        _forward[double](gates_x, w_h, hs, cs, tcs, acts, z)
    elif gates_x.dtype == np.float32:
        _forward[float](gates_x, w_h, hs, cs, tcs, acts, z)
    else:
        raise TypeError(f"unsupported dtype {gates_x.dtype}")
    return hs, (cs, tcs, acts)


def lstm_backward(d_hs, hs, cache, w_h):
    cs, tcs, acts = cache
    dtype = hs.dtype
    d_hs = np.ascontiguousarray(d_hs, dtype=dtype)
    w_h = np.ascontiguousarray(w_h, dtype=dtype)
    bsz, t_len, h = hs.shape
    d_gates = np.empty((bsz, t_len, 4 * h), dtype=dtype)
    dh_next = np.zeros((bsz, h), dtype=dtype)
    dc_next = np.zeros((bsz, h), dtype=dtype)
    zeros = np.zeros(h, dtype=dtype)
    if dtype == np.float64:
        _backward[double](d_hs, cs, tcs, acts, w_h, d_gates, dh_next, dc_next, zeros)
    elif dtype == np.float32:
        _backward[float](d_hs, cs, tcs, acts, w_h, d_gates, dh_next, dc_next, zeros)
    else:
        raise TypeError(f"unsupported dtype {dtype}")
    d_w_h = np.tensordot(hs[:, :-1, :], d_gates[:, 1:, :], axes=([0, 1], [0, 1]))
    return d_gates, d_w_h
