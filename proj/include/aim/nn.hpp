// nn.hpp — parameterized building blocks (conv, linear, norm) and weight
// initialization, including the edge-emphasized variant used by the mask
// estimators.

#ifndef AIM_NN_HPP
#define AIM_NN_HPP

#include <algorithm>
#include <string>
#include <vector>

#include "aim/ops.hpp"

namespace aim::nn {

enum class InitScheme { kStandardRandom, kEdgeEmphasized };

inline const char* init_scheme_name(InitScheme s) {
    return s == InitScheme::kStandardRandom ? "standard_random" : "edge_emphasized";
}

inline InitScheme parse_init_scheme(const std::string& s) {
    if (s == "standard_random") return InitScheme::kStandardRandom;
    if (s == "edge_emphasized") return InitScheme::kEdgeEmphasized;
    AIM_THROW(ConfigError, "unknown init scheme '" << s
                           << "' (expected standard_random|edge_emphasized)");
}

// He-uniform over U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
void init_he_uniform(Tensor<T>& w, int64_t fan_in, Rng& rng) {
    const double b = std::sqrt(6.0 / double(fan_in));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = T(rng.uniform(-b, b));
}

// Reorder each (out,in) k x k kernel slice so that |weight| is non-decreasing
// in the spatial distance from the kernel center: the smallest magnitudes end
// up at the center, the largest at the corners. This is a pure permutation of
// the standard draws (the marginal distribution is unchanged, and 1x1 kernels
// are left exactly as drawn); it biases the estimators toward edge-sensitive
// responses at initialization.
template <typename T>
void edge_emphasize(Tensor<T>& w, int64_t kh, int64_t kw) {
    const int64_t kk = kh * kw;
    if (kk <= 1) return;
    AIM_CHECK(w.size() % kk == 0, DimError,
              "edge_emphasize: weight size " << w.size() << " not divisible by k*k=" << kk);
    // Positions ordered by squared distance from the center, ties broken
    // lexicographically so the permutation is deterministic.
    const double ch = double(kh - 1) / 2.0, cw = double(kw - 1) / 2.0;
    std::vector<int64_t> pos(static_cast<size_t>(kk));
    for (int64_t i = 0; i < kk; ++i) pos[size_t(i)] = i;
    std::sort(pos.begin(), pos.end(), [&](int64_t a, int64_t b) {
        const double da = (double(a / kw) - ch) * (double(a / kw) - ch) +
                          (double(a % kw) - cw) * (double(a % kw) - cw);
        const double db = (double(b / kw) - ch) * (double(b / kw) - ch) +
                          (double(b % kw) - cw) * (double(b % kw) - cw);
        if (da != db) return da < db;
        return a < b;
    });
    std::vector<T> vals(static_cast<size_t>(kk));
    for (int64_t s = 0; s < w.size(); s += kk) {
        for (int64_t i = 0; i < kk; ++i) vals[size_t(i)] = w[s + i];
        std::sort(vals.begin(), vals.end(),
                  [](T a, T b) { return std::abs(a) < std::abs(b); });
        for (int64_t i = 0; i < kk; ++i) w[s + pos[size_t(i)]] = vals[size_t(i)];
    }
}

// ---------------------------------------------------------------------------
// Modules. Each owns its parameters; calling one inside a Graph binds the
// parameters as leaves and applies the matching op. Weight tensors are stored
// GEMM-ready: conv [Cout, Cin*k*k], linear [Cout, Cin].
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    int64_t in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;
    Param<T> w, b;

    Conv2d() = default;

    Conv2d(const std::string& name, int64_t in_c_, int64_t out_c_, int64_t k_, int64_t stride_,
           int64_t pad_, ParamGroup group, Rng& rng,
           InitScheme scheme = InitScheme::kStandardRandom)
        : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
        w.name = name + ".w";
        w.value = Tensor<T>({out_c, in_c * k * k});
        w.group = group;
        w.decay = true;
        init_he_uniform(w.value, in_c * k * k, rng);
        if (scheme == InitScheme::kEdgeEmphasized) edge_emphasize(w.value, k, k);
        b.name = name + ".b";
        b.value = Tensor<T>({out_c});  // zero bias
        b.group = group;
        b.decay = false;
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) {
        return ops::conv2d(g, x, g.param(w), g.param(b), k, k, stride, pad);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

template <typename T>
struct Linear {
    int64_t in_c = 0, out_c = 0;
    Param<T> w, b;

    Linear() = default;

    Linear(const std::string& name, int64_t in_c_, int64_t out_c_, ParamGroup group, Rng& rng)
        : in_c(in_c_), out_c(out_c_) {
        w.name = name + ".w";
        w.value = Tensor<T>({out_c, in_c});
        w.group = group;
        w.decay = true;
        init_he_uniform(w.value, in_c, rng);
        b.name = name + ".b";
        b.value = Tensor<T>({out_c});
        b.group = group;
        b.decay = false;
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) { return ops::linear(g, x, g.param(w), g.param(b)); }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

enum class NormKind {
    kSpatial,  // stats over H*W per (sample, channel) — backbone blocks
    kChannel   // stats over C per (sample, position) — top-down transform
};

template <typename T>
struct Norm {
    NormKind kind = NormKind::kSpatial;
    double eps = 1e-5;
    Param<T> gamma, beta;

    Norm() = default;

    Norm(const std::string& name, int64_t channels, NormKind kind_, double eps_, ParamGroup group)
        : kind(kind_), eps(eps_) {
        gamma.name = name + ".g";
        gamma.value = Tensor<T>::full({channels}, T(1));
        gamma.group = group;
        gamma.decay = false;
        beta.name = name + ".be";
        beta.value = Tensor<T>({channels});
        beta.group = group;
        beta.decay = false;
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) {
        return kind == NormKind::kSpatial
                   ? ops::norm_spatial(g, x, g.param(gamma), g.param(beta), eps)
                   : ops::norm_channel(g, x, g.param(gamma), g.param(beta), eps);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

}  // namespace aim::nn

#endif  // AIM_NN_HPP
