// kernels.hpp — GEMM micro-kernels with runtime ISA dispatch.
//
// Every convolution and linear layer in this codebase reduces to one of two
// row-major GEMM forms:
//
//   gemm_nn:  C[M,N] = A[M,K] * B[K,N]        + beta * C
//   gemm_nt:  C[M,N] = A[M,Kd] * B[N,Kd]^T    + beta * C   (rows dotted)
//
// alpha is fixed at 1 and beta is 0 or 1 — that is all the callers need.
// For float there are three interchangeable backends: a scalar reference,
// AVX2+FMA, and AVX-512F. The backend is picked once at startup from CPUID
// (override with AIM_KERNEL_BACKEND=scalar|avx2|avx512) and can be switched
// programmatically for equivalence tests. Backends differ in accumulation
// order, so cross-backend results agree to rounding, not bit-exactly; within
// one backend results are bit-reproducible.
//
// The templated generic versions below serve any scalar type (double is used
// by the finite-difference gradient tests) and double as the float scalar
// reference path.

#ifndef AIM_KERNELS_HPP
#define AIM_KERNELS_HPP

#include <cstdint>

#include "aim/common.hpp"

namespace aim::kern {

enum class Backend { kAuto, kScalar, kAvx2, kAvx512 };

const char* backend_name(Backend b);

// The concrete backend in use (never kAuto once resolved).
Backend active_backend();

// Force a backend; throws ConfigError if the CPU lacks it. kAuto re-resolves
// from CPUID / the AIM_KERNEL_BACKEND environment variable.
void set_backend(Backend b);

bool backend_supported(Backend b);

// Dispatched float entry points.
void sgemm_nn(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda,
              const float* B, int64_t ldb, float* C, int64_t ldc, float beta);
void sgemm_nt(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda,
              const float* B, int64_t ldb, float* C, int64_t ldc, float beta);

// ---------------------------------------------------------------------------
// Generic reference implementations (also the scalar float backend).
// Plain loops, k-innermost hoisted into a register accumulator; fast enough
// for tests and small problems, bit-stable across platforms.
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn_ref(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                 const T* B, int64_t ldb, T* C, int64_t ldc, T beta) {
    for (int64_t m = 0; m < M; ++m) {
        T* crow = C + m * ldc;
        if (beta == T(0)) {
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        }
        const T* arow = A + m * lda;
        for (int64_t k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* brow = B + k * ldb;
            for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

template <typename T>
void gemm_nt_ref(int64_t M, int64_t N, int64_t Kd, const T* A, int64_t lda,
                 const T* B, int64_t ldb, T* C, int64_t ldc, T beta) {
    for (int64_t m = 0; m < M; ++m) {
        const T* arow = A + m * lda;
        for (int64_t n = 0; n < N; ++n) {
            const T* brow = B + n * ldb;
            T acc = 0;
            for (int64_t k = 0; k < Kd; ++k) acc += arow[k] * brow[k];
            C[m * ldc + n] = (beta == T(0)) ? acc : C[m * ldc + n] + acc;
        }
    }
}

// Generic entry points: float routes through the dispatcher, everything else
// through the reference loops.
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda, const T* B, int64_t ldb,
             T* C, int64_t ldc, T beta) {
    gemm_nn_ref(M, N, K, A, lda, B, ldb, C, ldc, beta);
}
template <>
inline void gemm_nn<float>(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda,
                           const float* B, int64_t ldb, float* C, int64_t ldc, float beta) {
    sgemm_nn(M, N, K, A, lda, B, ldb, C, ldc, beta);
}

template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t Kd, const T* A, int64_t lda, const T* B, int64_t ldb,
             T* C, int64_t ldc, T beta) {
    gemm_nt_ref(M, N, Kd, A, lda, B, ldb, C, ldc, beta);
}
template <>
inline void gemm_nt<float>(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda,
                           const float* B, int64_t ldb, float* C, int64_t ldc, float beta) {
    sgemm_nt(M, N, Kd, A, lda, B, ldb, C, ldc, beta);
}

// dst[cols, rows] = src[rows, cols]^T, both row-major contiguous.
template <typename T>
void transpose(const T* src, int64_t rows, int64_t cols, T* dst) {
    constexpr int64_t kBlk = 32;  // block to keep both streams cache-resident
    for (int64_t r0 = 0; r0 < rows; r0 += kBlk) {
        const int64_t r1 = r0 + kBlk < rows ? r0 + kBlk : rows;
        for (int64_t c0 = 0; c0 < cols; c0 += kBlk) {
            const int64_t c1 = c0 + kBlk < cols ? c0 + kBlk : cols;
            for (int64_t r = r0; r < r1; ++r)
                for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im for NCHW convolutions, batched along the GEMM N dimension.
//
// col is [Cin*kh*kw, B*Ho*Wo] row-major: column index = ((b*Ho)+ho)*Wo+wo.
// With weights flattened to [Cout, Cin*kh*kw] the whole batch becomes one
// gemm_nn; the [Cout, B*Ho*Wo] product is then re-sliced per sample.
// ---------------------------------------------------------------------------

template <typename T>
void im2col(const T* x, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
    const int64_t ncols = B * Ho * Wo;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                T* row = col + ((c * kh + ki) * kw + kj) * ncols;
                for (int64_t b = 0; b < B; ++b) {
                    const T* xc = x + (b * C + c) * H * W;
                    T* out = row + b * Ho * Wo;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const int64_t hi = ho * stride + ki - pad;
                        if (hi < 0 || hi >= H) {
                            for (int64_t wo = 0; wo < Wo; ++wo) out[ho * Wo + wo] = T(0);
                            continue;
                        }
                        const T* xrow = xc + hi * W;
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const int64_t wi = wo * stride + kj - pad;
                            out[ho * Wo + wo] = (wi < 0 || wi >= W) ? T(0) : xrow[wi];
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add the column gradient back to input layout (inverse of im2col).
template <typename T>
void col2im(const T* col, int64_t B, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* dx) {
    const int64_t ncols = B * Ho * Wo;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const T* row = col + ((c * kh + ki) * kw + kj) * ncols;
                for (int64_t b = 0; b < B; ++b) {
                    T* xc = dx + (b * C + c) * H * W;
                    const T* in = row + b * Ho * Wo;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const int64_t hi = ho * stride + ki - pad;
                        if (hi < 0 || hi >= H) continue;
                        T* xrow = xc + hi * W;
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const int64_t wi = wo * stride + kj - pad;
                            if (wi >= 0 && wi < W) xrow[wi] += in[ho * Wo + wo];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace aim::kern

// Internal per-ISA entry points (defined in TUs compiled with the matching
// -m flags; only reachable through the dispatcher after a CPUID check).
namespace aim::kern::detail {
void sgemm_nn_avx2(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
                   int64_t ldb, float* C, int64_t ldc, float beta);
void sgemm_nt_avx2(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
                   int64_t ldb, float* C, int64_t ldc, float beta);
void sgemm_nn_avx512(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta);
void sgemm_nt_avx512(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta);
}  // namespace aim::kern::detail

#endif  // AIM_KERNELS_HPP
