# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched kernels for the field-aware interaction layer.

Shapes: ``V0``, ``Vprev``, ``A``, ``G`` are (B, M, D); ``W`` is (M, M);
``U`` is (M,). All arrays must be C-contiguous and share one float dtype.

The three M x M x D products per example go through ``_gemm_acc``, a
register-blocked 4 x 8 SIMD micro-kernel (``_gemm.h``). Its cost per multiply-add does not
depend on M, so measured time follows the operation count.
"""

import numpy as np

ctypedef fused real:
    float
    double

DEF DW_CHUNK = 16


cdef extern from "_gemm.h":
    void fint_gemm_d(Py_ssize_t m, Py_ssize_t n, Py_ssize_t k, const double* a, Py_ssize_t lda,
                     const double* b, Py_ssize_t ldb, double* c, Py_ssize_t ldc, int acc) nogil
    void fint_gemm_f(Py_ssize_t m, Py_ssize_t n, Py_ssize_t k, const float* a, Py_ssize_t lda,
                     const float* b, Py_ssize_t ldb, float* c, Py_ssize_t ldc, int acc) nogil
    void fint_fwd_elem_d(Py_ssize_t M, Py_ssize_t D, const double* v, const double* a, const double* u,
                         double* out) nogil
    void fint_fwd_elem_f(Py_ssize_t M, Py_ssize_t D, const float* v, const float* a, const float* u,
                         float* out) nogil
    void fint_bwd_elem_d(Py_ssize_t M, Py_ssize_t D, const double* g, const double* v, const double* a,
                         const double* u, const double* v0, double* dA, Py_ssize_t lda, double* dUd,
                         double* dv, double* v0t, Py_ssize_t ldt) nogil
    void fint_bwd_elem_f(Py_ssize_t M, Py_ssize_t D, const float* g, const float* v, const float* a,
                         const float* u, const float* v0, float* dA, Py_ssize_t lda, float* dUd,
                         float* dv, float* v0t, Py_ssize_t ldt) nogil


cdef inline void _gemm_acc(Py_ssize_t m, Py_ssize_t n, Py_ssize_t k,
                           const real* a, Py_ssize_t lda,
                           const real* b, Py_ssize_t ldb,
                           real* c, Py_ssize_t ldc, bint acc) noexcept nogil:
    """Row-major ``C[m, n] += A[m, k] @ B[k, n]``, or ``=`` when ``acc`` is false."""
    if real is double:
        fint_gemm_d(m, n, k, a, lda, b, ldb, c, ldc, acc)
    else:
        fint_gemm_f(m, n, k, a, lda, b, ldb, c, ldc, acc)


def interact_forward(real[:, :, ::1] V0, real[:, :, ::1] Vprev,
                     real[:, ::1] W, real[::1] U):
    cdef Py_ssize_t B = V0.shape[0], M = V0.shape[1], D = V0.shape[2]
    cdef Py_ssize_t b
    dtype = np.float64 if real is double else np.float32
    A_arr = np.empty((B, M, D), dtype=dtype)
    out_arr = np.empty((B, M, D), dtype=dtype)
    cdef real[:, :, ::1] A = A_arr
    cdef real[:, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            _gemm_acc(M, D, M, &W[0, 0], M, &V0[b, 0, 0], D, &A[b, 0, 0], D, False)
            if real is double:
                fint_fwd_elem_d(M, D, &Vprev[b, 0, 0], &A[b, 0, 0], &U[0], &out[b, 0, 0])
            else:
                fint_fwd_elem_f(M, D, &Vprev[b, 0, 0], &A[b, 0, 0], &U[0], &out[b, 0, 0])
    return out_arr, A_arr


def interact_backward(real[:, :, ::1] V0, real[:, :, ::1] Vprev,
                      real[:, :, ::1] A, real[:, ::1] W, real[::1] U,
                      real[:, :, ::1] G, dV0_acc=None):
    """Return (dVprev, dV0, dW, dU) for one layer given upstream ``G``.

    When ``dV0_acc`` is given this layer's ``V0`` gradient is added into it in
    place and it is returned as ``dV0``.
    """
    cdef Py_ssize_t B = V0.shape[0], M = V0.shape[1], D = V0.shape[2]
    cdef Py_ssize_t b, i, j, d
    dtype = np.float64 if real is double else np.float32
    dVprev_arr = np.empty((B, M, D), dtype=dtype)
    dV0_arr = np.zeros((B, M, D), dtype=dtype) if dV0_acc is None else dV0_acc
    dW_arr = np.zeros((M, M), dtype=dtype)
    dU_arr = np.zeros(M, dtype=dtype)
    # dA and V0^T for a chunk of examples, laid out so dW takes one gemm per chunk (k = chunk * D)
    dA_arr = np.empty((M, DW_CHUNK, D), dtype=dtype)
    v0t_arr = np.empty((DW_CHUNK, D, M), dtype=dtype)
    wt_arr = np.ascontiguousarray(np.asarray(W).T)
    # per-lane dU partial sums; a scalar running sum would serialize on add latency
    dUd_arr = np.zeros((M, D), dtype=dtype)
    cdef real[:, :, ::1] dVprev = dVprev_arr
    cdef real[:, :, ::1] dV0 = dV0_arr
    if dV0.shape[0] != B or dV0.shape[1] != M or dV0.shape[2] != D:
        raise ValueError("dV0_acc must have the shape of V0")
    cdef real[:, ::1] dW = dW_arr
    cdef real[::1] dU = dU_arr
    cdef real[:, :, ::1] dA = dA_arr
    cdef real[:, :, ::1] v0t = v0t_arr
    cdef real[:, ::1] WT = wt_arr
    cdef real[:, ::1] dUd = dUd_arr
    cdef Py_ssize_t CD = DW_CHUNK * D
    cdef Py_ssize_t c = 0
    with nogil:
        for b in range(B):
            if real is double:
                fint_bwd_elem_d(M, D, &G[b, 0, 0], &Vprev[b, 0, 0], &A[b, 0, 0], &U[0], &V0[b, 0, 0],
                                &dA[0, c, 0], CD, &dUd[0, 0], &dVprev[b, 0, 0], &v0t[c, 0, 0], M)
            else:
                fint_bwd_elem_f(M, D, &G[b, 0, 0], &Vprev[b, 0, 0], &A[b, 0, 0], &U[0], &V0[b, 0, 0],
                                &dA[0, c, 0], CD, &dUd[0, 0], &dVprev[b, 0, 0], &v0t[c, 0, 0], M)
            # dV0_b += W^T @ dA_b
            _gemm_acc(M, D, M, &WT[0, 0], M, &dA[0, c, 0], CD, &dV0[b, 0, 0], D, True)
            c += 1
            if c == DW_CHUNK or b + 1 == B:
                # dW += sum over the chunk of dA_b @ V0_b^T
                _gemm_acc(M, M, c * D, &dA[0, 0, 0], CD, &v0t[0, 0, 0], M, &dW[0, 0], M, True)
                c = 0
        for i in range(M):
            for d in range(D):
                dU[i] += dUd[i, d]
    return dVprev_arr, dV0_arr, dW_arr, dU_arr


def segment_sum(long long[::1] inverse, real[:, ::1] values, Py_ssize_t n_segments):
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``inverse``."""
    cdef Py_ssize_t n = values.shape[0], D = values.shape[1], r, s, d
    dtype = np.float64 if real is double else np.float32
    out_arr = np.zeros((n_segments, D), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for r in range(n):
            s = inverse[r]
            for d in range(D):
                out[s, d] += values[r, d]
    return out_arr
