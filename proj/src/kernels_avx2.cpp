// kernels_avx2.cpp — AVX2+FMA GEMM backend.
//
// gemm_nn uses a 6x16 register-tiled micro-kernel over a zero-padded packed
// B panel (pack once per 16-column strip, reuse across all row blocks).
// gemm_nt dots row pairs with a 3x4 tile of vector accumulators — that shape
// uses exactly the 16 ymm registers without spilling.
// This translation unit is the only one compiled with -mavx2 -mfma; it must
// only be entered after the dispatcher's CPUID check.

#include <immintrin.h>

#include <vector>

#include "aim/kernels.hpp"

namespace aim::kern::detail {

namespace {

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}

constexpr int kNR = 16;  // two ymm of output columns
constexpr int kMR = 6;   // rows per micro-kernel (6*2 acc + 2 b + 1 a = 15 ymm)

template <int MB>
void kern_nn(int64_t K, const float* A, int64_t lda, const float* Bp, float* C, int64_t ldc,
             float beta, int nb) {
    __m256 acc[MB][2];
    for (int r = 0; r < MB; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_ps();
    for (int64_t k = 0; k < K; ++k) {
        const __m256 b0 = _mm256_loadu_ps(Bp + kNR * k);
        const __m256 b1 = _mm256_loadu_ps(Bp + kNR * k + 8);
        for (int r = 0; r < MB; ++r) {
            const __m256 a = _mm256_broadcast_ss(A + r * lda + k);
            acc[r][0] = _mm256_fmadd_ps(a, b0, acc[r][0]);
            acc[r][1] = _mm256_fmadd_ps(a, b1, acc[r][1]);
        }
    }
    if (nb == kNR) {
        for (int r = 0; r < MB; ++r) {
            float* c = C + r * ldc;
            __m256 v0 = acc[r][0], v1 = acc[r][1];
            if (beta != 0.0f) {
                v0 = _mm256_add_ps(v0, _mm256_loadu_ps(c));
                v1 = _mm256_add_ps(v1, _mm256_loadu_ps(c + 8));
            }
            _mm256_storeu_ps(c, v0);
            _mm256_storeu_ps(c + 8, v1);
        }
    } else {
        alignas(32) float tmp[kNR];
        for (int r = 0; r < MB; ++r) {
            _mm256_store_ps(tmp, acc[r][0]);
            _mm256_store_ps(tmp + 8, acc[r][1]);
            float* c = C + r * ldc;
            for (int j = 0; j < nb; ++j) c[j] = (beta == 0.0f) ? tmp[j] : c[j] + tmp[j];
        }
    }
}

template <int MR, int NR>
void kern_nt(int64_t Kd, const float* A, int64_t lda, const float* B, int64_t ldb, float* C,
             int64_t ldc, float beta) {
    __m256 acc[MR][NR];
    for (int r = 0; r < MR; ++r)
        for (int c = 0; c < NR; ++c) acc[r][c] = _mm256_setzero_ps();
    int64_t k = 0;
    for (; k + 8 <= Kd; k += 8) {
        __m256 a[MR];
        for (int r = 0; r < MR; ++r) a[r] = _mm256_loadu_ps(A + r * lda + k);
        for (int c = 0; c < NR; ++c) {
            const __m256 b = _mm256_loadu_ps(B + c * ldb + k);
            for (int r = 0; r < MR; ++r) acc[r][c] = _mm256_fmadd_ps(a[r], b, acc[r][c]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        for (int c = 0; c < NR; ++c) {
            float s = hsum8(acc[r][c]);
            for (int64_t kk = k; kk < Kd; ++kk) s += A[r * lda + kk] * B[c * ldb + kk];
            float* out = C + r * ldc + c;
            *out = (beta == 0.0f) ? s : *out + s;
        }
    }
}

}  // namespace

void sgemm_nn_avx2(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
                   int64_t ldb, float* C, int64_t ldc, float beta) {
    thread_local std::vector<float> packbuf;
    packbuf.resize(size_t(K) * kNR);
    float* Bp = packbuf.data();
    for (int64_t n0 = 0; n0 < N; n0 += kNR) {
        const int nb = int(N - n0 < kNR ? N - n0 : kNR);
        if (nb == kNR) {
            for (int64_t k = 0; k < K; ++k) {
                _mm256_storeu_ps(Bp + kNR * k, _mm256_loadu_ps(B + k * ldb + n0));
                _mm256_storeu_ps(Bp + kNR * k + 8, _mm256_loadu_ps(B + k * ldb + n0 + 8));
            }
        } else {
            for (int64_t k = 0; k < K; ++k) {
                for (int j = 0; j < kNR; ++j)
                    Bp[kNR * k + j] = (j < nb) ? B[k * ldb + n0 + j] : 0.0f;
            }
        }
        for (int64_t m0 = 0; m0 < M; m0 += kMR) {
            const int mb = int(M - m0 < kMR ? M - m0 : kMR);
            const float* a = A + m0 * lda;
            float* c = C + m0 * ldc + n0;
            switch (mb) {
                case 6: kern_nn<6>(K, a, lda, Bp, c, ldc, beta, nb); break;
                case 5: kern_nn<5>(K, a, lda, Bp, c, ldc, beta, nb); break;
                case 4: kern_nn<4>(K, a, lda, Bp, c, ldc, beta, nb); break;
                case 3: kern_nn<3>(K, a, lda, Bp, c, ldc, beta, nb); break;
                case 2: kern_nn<2>(K, a, lda, Bp, c, ldc, beta, nb); break;
                default: kern_nn<1>(K, a, lda, Bp, c, ldc, beta, nb); break;
            }
        }
    }
}

void sgemm_nt_avx2(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
                   int64_t ldb, float* C, int64_t ldc, float beta) {
    constexpr int64_t MR = 3, NR = 4;
    for (int64_t m0 = 0; m0 < M; m0 += MR) {
        const int mb = int(M - m0 < MR ? M - m0 : MR);
        for (int64_t n0 = 0; n0 < N; n0 += NR) {
            const int nb = int(N - n0 < NR ? N - n0 : NR);
            const float* a = A + m0 * lda;
            const float* b = B + n0 * ldb;
            float* c = C + m0 * ldc + n0;
            switch (mb * 8 + nb) {
                case 3 * 8 + 4: kern_nt<3, 4>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 3 * 8 + 3: kern_nt<3, 3>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 3 * 8 + 2: kern_nt<3, 2>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 3 * 8 + 1: kern_nt<3, 1>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 2 * 8 + 4: kern_nt<2, 4>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 2 * 8 + 3: kern_nt<2, 3>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 2 * 8 + 2: kern_nt<2, 2>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 2 * 8 + 1: kern_nt<2, 1>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 1 * 8 + 4: kern_nt<1, 4>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 1 * 8 + 3: kern_nt<1, 3>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                case 1 * 8 + 2: kern_nt<1, 2>(Kd, a, lda, b, ldb, c, ldc, beta); break;
                default: kern_nt<1, 1>(Kd, a, lda, b, ldb, c, ldc, beta); break;
            }
        }
    }
}

}  // namespace aim::kern::detail
