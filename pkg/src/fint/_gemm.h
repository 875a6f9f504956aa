/* Row-major C[m,n] (+)= A[m,k] @ B[k,n]; `acc` = 0 overwrites C with a 4 x 8 register block built on
 * GCC/Clang vector extensions, so the inner loop is explicit SIMD. */
#ifndef FINT_GEMM_H
#define FINT_GEMM_H
#include <stddef.h>
#include <string.h>

#define FINT_GEMM_DEF(NAME, T, VT, LANES)                                          \
typedef T VT __attribute__((vector_size(8 * sizeof(T))));                           \
static inline VT NAME##_ld(const T *p) { VT v; memcpy(&v, p, sizeof v); return v; } \
static inline void NAME##_st(T *p, VT v) { memcpy(p, &v, sizeof v); }               \
static void NAME(ptrdiff_t m, ptrdiff_t n, ptrdiff_t k, const T *a, ptrdiff_t lda,  \
                 const T *b, ptrdiff_t ldb, T *c, ptrdiff_t ldc, int acc) {                  \
    ptrdiff_t i0, j0, p, i, j;                                                     \
    for (i0 = 0; i0 + 4 <= m; i0 += 4) {                                           \
        for (j0 = 0; j0 + 8 <= n; j0 += 8) {                                       \
            VT c0 = {0}, c1 = {0}, c2 = {0}, c3 = {0};                              \
            const T *a0 = a + i0 * lda;                                            \
            for (p = 0; p < k; p++) {                                              \
                VT bv = NAME##_ld(b + p * ldb + j0);                               \
                c0 += a0[p] * bv;                                                  \
                c1 += a0[lda + p] * bv;                                            \
                c2 += a0[2 * lda + p] * bv;                                        \
                c3 += a0[3 * lda + p] * bv;                                        \
            }                                                                      \
            T *cr = c + i0 * ldc + j0;                                             \
            if (acc) {                                                             \
                c0 += NAME##_ld(cr); c1 += NAME##_ld(cr + ldc);                    \
                c2 += NAME##_ld(cr + 2 * ldc); c3 += NAME##_ld(cr + 3 * ldc);      \
            }                                                                      \
            NAME##_st(cr, c0); NAME##_st(cr + ldc, c1);                            \
            NAME##_st(cr + 2 * ldc, c2); NAME##_st(cr + 3 * ldc, c3);              \
        }                                                                          \
        for (i = i0; i < i0 + 4; i++)                                              \
            for (j = j0; j < n; j++) {                                             \
                T s = 0;                                                           \
                for (p = 0; p < k; p++) s += a[i * lda + p] * b[p * ldb + j];      \
                c[i * ldc + j] = acc ? c[i * ldc + j] + s : s;                                               \
            }                                                                      \
    }                                                                              \
    for (i = i0; i < m; i++)                                                       \
        for (j = 0; j < n; j++) {                                                  \
            T s = 0;                                                               \
            for (p = 0; p < k; p++) s += a[i * lda + p] * b[p * ldb + j];          \
            c[i * ldc + j] = acc ? c[i * ldc + j] + s : s;                                                   \
        }                                                                          \
}

FINT_GEMM_DEF(fint_gemm_d, double, fint_v8d, 8)
FINT_GEMM_DEF(fint_gemm_f, float, fint_v8f, 8)

/* Elementwise parts of one example, on restrict pointers so the d-loops vectorize.
 * forward: out = v * a + u * v
 * backward: dA = g * v (rows of stride lda), dUd += dA, dVprev = g * a + u * g, v0t = V0^T */
#define FINT_ELEM_DEF(SUF, T)                                                              \
static void fint_fwd_elem_##SUF(ptrdiff_t M, ptrdiff_t D, const T *restrict v,            \
                                const T *restrict a, const T *restrict u, T *restrict out) { \
    for (ptrdiff_t i = 0; i < M; i++) {                                                    \
        const T ui = u[i];                                                                 \
        for (ptrdiff_t d = 0; d < D; d++) {                                                \
            const T x = v[i * D + d];                                                      \
            out[i * D + d] = x * a[i * D + d] + ui * x;                                    \
        }                                                                                  \
    }                                                                                      \
}                                                                                          \
static void fint_bwd_elem_##SUF(ptrdiff_t M, ptrdiff_t D, const T *restrict g,            \
                                const T *restrict v, const T *restrict a, const T *restrict u, \
                                const T *restrict v0, T *restrict dA, ptrdiff_t lda,       \
                                T *restrict dUd, T *restrict dv, T *restrict v0t, ptrdiff_t ldt) { \
    for (ptrdiff_t i = 0; i < M; i++) {                                                    \
        const T ui = u[i];                                                                 \
        for (ptrdiff_t d = 0; d < D; d++) {                                                \
            const T gi = g[i * D + d];                                                     \
            const T t = gi * v[i * D + d];                                                 \
            dA[i * lda + d] = t;                                                           \
            dUd[i * D + d] += t;                                                           \
            dv[i * D + d] = gi * a[i * D + d] + ui * gi;                                   \
        }                                                                                  \
    }                                                                                      \
    for (ptrdiff_t d = 0; d < D; d++)                                                      \
        for (ptrdiff_t j = 0; j < M; j++) v0t[d * ldt + j] = v0[j * D + d];                \
}

FINT_ELEM_DEF(d, double)
FINT_ELEM_DEF(f, float)

#endif
