// kernels.cpp — backend resolution and dispatch for the float GEMM kernels.

#include "aim/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <string>

namespace aim::kern {

namespace {

using GemmFn = void (*)(int64_t, int64_t, int64_t, const float*, int64_t, const float*, int64_t,
                        float*, int64_t, float);

struct Dispatch {
    Backend backend = Backend::kScalar;
    GemmFn nn = nullptr;
    GemmFn nt = nullptr;
};

void sgemm_nn_scalar(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta) {
    gemm_nn_ref(M, N, K, A, lda, B, ldb, C, ldc, beta);
}
void sgemm_nt_scalar(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
                     int64_t ldb, float* C, int64_t ldc, float beta) {
    gemm_nt_ref(M, N, Kd, A, lda, B, ldb, C, ldc, beta);
}

bool cpu_has(Backend b) {
    switch (b) {
        case Backend::kScalar: return true;
        case Backend::kAvx2: return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
        case Backend::kAvx512: return __builtin_cpu_supports("avx512f");
        case Backend::kAuto: return true;
    }
    return false;
}

Dispatch make_dispatch(Backend b) {
    switch (b) {
        case Backend::kAvx2: return {Backend::kAvx2, detail::sgemm_nn_avx2, detail::sgemm_nt_avx2};
        case Backend::kAvx512:
            return {Backend::kAvx512, detail::sgemm_nn_avx512, detail::sgemm_nt_avx512};
        default: return {Backend::kScalar, sgemm_nn_scalar, sgemm_nt_scalar};
    }
}

Backend parse_backend(const char* s) {
    std::string v(s);
    if (v == "scalar") return Backend::kScalar;
    if (v == "avx2") return Backend::kAvx2;
    if (v == "avx512") return Backend::kAvx512;
    if (v == "auto") return Backend::kAuto;
    AIM_THROW(ConfigError, "AIM_KERNEL_BACKEND: unknown backend '" << v
                           << "' (expected scalar|avx2|avx512|auto)");
}

Backend resolve_auto() {
    if (const char* env = std::getenv("AIM_KERNEL_BACKEND")) {
        const Backend want = parse_backend(env);
        if (want != Backend::kAuto) {
            AIM_CHECK(cpu_has(want), ConfigError,
                      "AIM_KERNEL_BACKEND=" << backend_name(want) << " not supported by this CPU");
            return want;
        }
    }
    // Widest supported ISA wins; the choice is fixed per machine so repeated
    // runs on one host stay bit-identical.
    if (cpu_has(Backend::kAvx512)) return Backend::kAvx512;
    if (cpu_has(Backend::kAvx2)) return Backend::kAvx2;
    return Backend::kScalar;
}

Dispatch& dispatch() {
    static Dispatch d = make_dispatch(resolve_auto());
    return d;
}

}  // namespace

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::kAuto: return "auto";
        case Backend::kScalar: return "scalar";
        case Backend::kAvx2: return "avx2";
        case Backend::kAvx512: return "avx512";
    }
    return "?";
}

Backend active_backend() { return dispatch().backend; }

bool backend_supported(Backend b) { return cpu_has(b); }

void set_backend(Backend b) {
    if (b == Backend::kAuto) {
        dispatch() = make_dispatch(resolve_auto());
        return;
    }
    AIM_CHECK(cpu_has(b), ConfigError,
              "kernel backend '" << backend_name(b) << "' not supported by this CPU");
    dispatch() = make_dispatch(b);
}

void sgemm_nn(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B,
              int64_t ldb, float* C, int64_t ldc, float beta) {
    dispatch().nn(M, N, K, A, lda, B, ldb, C, ldc, beta);
}

void sgemm_nt(int64_t M, int64_t N, int64_t Kd, const float* A, int64_t lda, const float* B,
              int64_t ldb, float* C, int64_t ldc, float beta) {
    dispatch().nt(M, N, Kd, A, lda, B, ldb, C, ldc, beta);
}

}  // namespace aim::kern
