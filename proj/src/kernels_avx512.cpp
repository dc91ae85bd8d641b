// kernels_avx512.cpp — AVX-512F GEMM backend.
//
// Same structure as the AVX2 backend with wider tiles: gemm_nn runs an 8x32
// micro-kernel (16 zmm accumulators) over a packed B strip, gemm_nt a 4x6
// tile (24 zmm accumulators, well inside the 32-register file). Only entered
// after the dispatcher verifies avx512f support.

#include <immintrin.h>

#include <vector>

#include "aim/kernels.hpp"

namespace aim::kern::detail {

namespace {

constexpr int kNR = 32;  // two zmm of output columns
constexpr int kMR = 8;

template <int MB>
void kern_nn(int64_t K, const float* A, int64_t lda, const float* Bp, float* C, int64_t ldc,
             float beta, int nb) {
    __m512 acc[MB][2];
    for (int r = 0; r < MB; ++r) acc[r][0] = acc[r][1] = _mm512_setzero_ps();
    for (int64_t k = 0; k < K; ++k) {
        const __m512 b0 = _mm512_loadu_ps(Bp + kNR * k);
        const __m512 b1 = _mm512_loadu_ps(Bp + kNR * k + 16);
        for (int r = 0; r < MB; ++r) {
            const __m512 a = _mm512_set1_ps(A[r * lda + k]);
            acc[r][0] = _mm512_fmadd_ps(a, b0, acc[r][0]);
            acc[r][1] = _mm512_fmadd_ps(a, b1, acc[r][1]);
        }
    }
    if (nb == kNR) {
        for (int r = 0; r < MB; ++r) {
            float* c = C + r * ldc;
            __m512 v0 = acc[r][0], v1 = acc[r][1];
            if (beta != 0.0f) {
                v0 = _mm512_add_ps(v0, _mm512_loadu_ps(c));
                v1 = _mm512_add_ps(v1, _mm512_loadu_ps(c + 16));
            }
            _mm512_storeu_ps(c, v0);
            _mm512_storeu_ps(c + 16, v1);
        }
    } else {
        // Partial column strip: masked stores over the two zmm halves.
        const int lo = nb < 16 ? nb : 16;
        const int hi = nb - lo;
        const __mmask16 m0 = __mmask16((1u << lo) - 1u);
        const __mmask16 m1 = __mmask16(hi ? (1u << hi) - 1u : 0u);
        for (int r = 0; r < MB; ++r) {
            float* c = C + r * ldc;
            __m512 v0 = acc[r][0], v1 = acc[r][1];
            if (beta != 0.0f) {
                v0 = _mm512_add_ps(v0, _mm512_maskz_loadu_ps(m0, c));
                if (m1) v1 = _mm512_add_ps(v1, _mm512_maskz_loadu_ps(m1, c + 16));
            }
            _mm512_mask_storeu_ps(c, m0, v0);
            if (m1) _mm512_mask_storeu_ps(c + 16, m1, v1);
        }
    }
}

template <int MR, int NR>
void kern_nt(int64_t Kd, const float* A, int64_t lda, const float* B, int64_t ldb, float* C,
             int64_t ldc, float beta) {
    __m512 acc[MR][NR];
    for (int r = 0; r < MR; ++r)
        for (int c = 0; c < NR; ++c) acc[r][c] = _mm512_setzero_ps();
    int64_t k = 0;
    for (; k + 16 <= Kd; k += 16) {
        __m512 a[MR];
        for (int r = 0; r < MR; ++r) a[r] = _mm512_loadu_ps(A + r * lda + k);
        for (int c = 0; c < NR; ++c) {
            const __m512 b = _mm512_loadu_ps(B + c * ldb + k);
            for (int r = 0; r < MR; ++r) acc[r][c] = _mm512_fmadd_ps(a[r], b, acc[r][c]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        for (int c = 0; c < NR; ++c) {
            float s = _mm512_reduce_add_ps(acc[r][c]);
            for (int64_t kk = k; kk < Kd; ++kk) s += A[r * lda + kk] * B[c * ldb + kk];
            float* out = C + r * ldc + c;
            *out = (beta == 0.0f) ? s : *out + s;
        }
    }
}

template <int MR>
void kern_nt_rows(int64_t Kd, int nb, const float* A, int64_t lda, const float* B, int64_t ldb,
                  float* C, int64_t ldc, float beta) {
    switch (nb) {
        case 6: kern_nt<MR, 6>(Kd, A, lda, B, ldb, C, ldc, beta); break;
        case 5: kern_nt<MR, 5>(Kd, A, lda, B, ldb, C, ldc, beta); break;
        case 4: kern_nt<MR, 4>(Kd, A, lda, B, ldb, C, ldc, beta); break;
        case 3: kern_nt<MR, 3>(Kd, A, lda, B, ldb, C, ldc, beta); break;
        case 2: kern_nt<MR, 2>(Kd, A, lda, B, ldb, C, ldc, beta); break;
        default: kern_nt<MR, 1>(Kd, A, lda, B, ldb, C, ldc, beta); break;
    }
}

}  // namespace

void sgemm_nn_avx512(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta) {
    thread_local std::vector<float> packbuf;
    packbuf.resize(size_t(K) * kNR);
    float* Bp = packbuf.data();
    for (int64_t n0 = 0; n0 < N; n0 += kNR) {
        const int nb = int(N - n0 < kNR ? N - n0 : kNR);
        if (nb == kNR) {
            for (int64_t k = 0; k < K; ++k) {
                _mm512_storeu_ps(Bp + kNR * k, _mm512_loadu_ps(B + k * ldb + n0));
                _mm512_storeu_ps(Bp + kNR * k + 16, _mm512_loadu_ps(B + k * ldb + n0 + 16));
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
                case 8: kern_nn<8>(K, a, lda, Bp, c, ldc, beta, nb); break;
                case 7: kern_nn<7>(K, a, lda, Bp, c, ldc, beta, nb); break;
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

void sgemm_nt_avx512(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta) {
    constexpr int64_t MR = 4, NR = 6;
    for (int64_t m0 = 0; m0 < M; m0 += MR) {
        const int mb = int(M - m0 < MR ? M - m0 : MR);
        for (int64_t n0 = 0; n0 < N; n0 += NR) {
            const int nb = int(N - n0 < NR ? N - n0 : NR);
            const float* a = A + m0 * lda;
            const float* b = B + n0 * ldb;
            float* c = C + m0 * ldc + n0;
            switch (mb) {
                case 4: kern_nt_rows<4>(Kd, nb, a, lda, b, ldb, c, ldc, beta); break;
                case 3: kern_nt_rows<3>(Kd, nb, a, lda, b, ldb, c, ldc, beta); break;
                case 2: kern_nt_rows<2>(Kd, nb, a, lda, b, ldb, c, ldc, beta); break;
                default: kern_nt_rows<1>(Kd, nb, a, lda, b, ldb, c, ldc, beta); break;
            }
        }
    }
}

}  // namespace aim::kern::detail
