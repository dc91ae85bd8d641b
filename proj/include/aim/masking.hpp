// masking.hpp — mask estimators, the stochastic binary gate, and mask
// utilities (application, active ratio, merged masks).
//
// An estimator maps a stage's feature map to a single-channel logit map:
// 3x3 conv -> three residual blocks -> an identity branch concatenated with a
// globally average-pooled context branch (broadcast back over space) -> 1x1
// conv. The gate binarizes logit maps: stochastically during training
// (two-class Gumbel-softmax with a straight-through estimator), by
// deterministic thresholding during evaluation.

#ifndef AIM_MASKING_HPP
#define AIM_MASKING_HPP

#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "aim/nn.hpp"

namespace aim {

struct MaskEstimatorConfig {
    int64_t hidden_channels = 32;
    int64_t num_residual_blocks = 3;
    nn::InitScheme init_scheme = nn::InitScheme::kStandardRandom;

    void validate() const {
        AIM_CHECK(hidden_channels >= 1, ConfigError,
                  "estimator: hidden_channels must be >= 1, got " << hidden_channels);
        AIM_CHECK(num_residual_blocks >= 1, ConfigError,
                  "estimator: num_residual_blocks must be >= 1, got " << num_residual_blocks);
    }
};

struct GateConfig {
    double temperature = 1.0;
    double eval_threshold = 0.0;

    void validate() const {
        AIM_CHECK(temperature > 0.0, ConfigError,
                  "gate: temperature must be positive, got " << temperature);
    }
};

template <typename T>
class MaskEstimator {
  public:
    MaskEstimator() = default;

    MaskEstimator(const std::string& name, const MaskEstimatorConfig& cfg, int64_t in_channels,
                  Rng& rng)
        : in_channels_(in_channels) {
        cfg.validate();
        const int64_t h = cfg.hidden_channels;
        // Every conv is followed by a channel LayerNorm: without it the
        // residual stack compounds whatever scale the optimizer gives it, and
        // a few coherent "open the gate" steps are enough to drive the logits
        // past the range where the straight-through gradient survives.
        stem_ = nn::Conv2d<T>(name + ".stem", in_channels, h, 3, 1, 1, ParamGroup::kTopdown, rng,
                              cfg.init_scheme);
        stem_norm_ = nn::Norm<T>(name + ".stem.norm", h, nn::NormKind::kChannel, kNormEps,
                                 ParamGroup::kTopdown);
        for (int64_t i = 0; i < cfg.num_residual_blocks; ++i) {
            const std::string rn = name + ".res" + std::to_string(i);
            Res r;
            r.c1 = nn::Conv2d<T>(rn + ".c1", h, h, 3, 1, 1, ParamGroup::kTopdown, rng,
                                 cfg.init_scheme);
            r.n1 = nn::Norm<T>(rn + ".n1", h, nn::NormKind::kChannel, kNormEps,
                               ParamGroup::kTopdown);
            r.c2 = nn::Conv2d<T>(rn + ".c2", h, h, 3, 1, 1, ParamGroup::kTopdown, rng,
                                 cfg.init_scheme);
            r.n2 = nn::Norm<T>(rn + ".n2", h, nn::NormKind::kChannel, kNormEps,
                               ParamGroup::kTopdown);
            blocks_.push_back(std::move(r));
        }
        // 1x1 head over [identity ; broadcast GAP] — untouched by the
        // edge-emphasized permutation (1x1 kernels have a single position).
        head_ = nn::Conv2d<T>(name + ".head", 2 * h, 1, 1, 1, 0, ParamGroup::kTopdown, rng,
                              cfg.init_scheme);
    }

    int64_t in_channels() const { return in_channels_; }

    // feat [B,C,h,w] -> logits [B,1,h,w]
    Var<T> operator()(Graph<T>& g, Var<T> feat) {
        const Tensor<T>& fv = feat.val();
        AIM_CHECK(fv.rank() == 4 && fv.dim(1) == in_channels_, ConfigError,
                  "mask estimator built for " << in_channels_ << " channels, got "
                                              << shape_str(fv.shape()));
        Var<T> x = ops::relu(g, stem_norm_(g, stem_(g, feat)));
        for (auto& r : blocks_) {
            Var<T> y = r.n2(g, r.c2(g, ops::relu(g, r.n1(g, r.c1(g, x)))));
            x = ops::relu(g, ops::add(g, x, y));
        }
        // Bounded soft attention map: with a raw linear head the logits race
        // past the range where the gate's sigmoid keeps a nonzero float
        // derivative (~|z| > 17) and the masks freeze; the polynomial-tailed
        // bound keeps every gate trainable while still allowing near-certain
        // decisions (sigmoid(8) > 0.9996).
        return ops::soft_bound(g, head_(g, ops::concat_gap(g, x)), kLogitBound);
    }

    void collect_params(std::vector<Param<T>*>& out) {
        stem_.collect(out);
        stem_norm_.collect(out);
        for (auto& r : blocks_) {
            r.c1.collect(out);
            r.n1.collect(out);
            r.c2.collect(out);
            r.n2.collect(out);
        }
        head_.collect(out);
    }

  private:
    static constexpr double kNormEps = 1e-5;
    static constexpr double kLogitBound = 8.0;

    struct Res {
        nn::Conv2d<T> c1, c2;
        nn::Norm<T> n1, n2;
    };

    int64_t in_channels_ = 0;
    nn::Conv2d<T> stem_;
    nn::Norm<T> stem_norm_;
    std::vector<Res> blocks_;
    nn::Conv2d<T> head_;
};

// Binarize a logit map with the gate. Mode comes from the graph: stochastic
// straight-through sampling in training, hard thresholding in eval.
template <typename T>
Var<T> gumbel_binarize(Graph<T>& g, Var<T> logits, const GateConfig& gate,
                       const std::type_identity_t<Tensor<T>>* noise_override = nullptr,
                       std::type_identity_t<Tensor<T>>* noise_out = nullptr) {
    gate.validate();
    return ops::gumbel_gate(g, logits, gate.temperature, gate.eval_threshold, noise_override,
                            noise_out);
}

// O = features ⊙ mask (mask broadcast across channels).
template <typename T>
Var<T> apply_mask(Graph<T>& g, Var<T> features, Var<T> mask) {
    return ops::mul_mask(g, features, mask);
}

// Per-sample fraction of active cells of a binary mask [B,1,h,w].
template <typename T>
std::vector<double> active_ratio(const Tensor<T>& mask) {
    check_rank(mask, 4, "active_ratio");
    const int64_t B = mask.dim(0), HW = mask.dim(1) * mask.dim(2) * mask.dim(3);
    std::vector<double> r(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        double s = 0;
        const T* p = mask.data() + b * HW;
        for (int64_t i = 0; i < HW; ++i) s += double(p[i]);
        r[size_t(b)] = s / double(HW);
    }
    return r;
}

// Nearest-neighbour upsample of a mask tensor to (Ht, Wt); the target must be
// an integer multiple of the source extent.
template <typename T>
Tensor<T> upsample_mask(const Tensor<T>& m, int64_t Ht, int64_t Wt) {
    check_rank(m, 4, "upsample_mask");
    const int64_t B = m.dim(0), C = m.dim(1), H = m.dim(2), W = m.dim(3);
    AIM_CHECK(Ht % H == 0 && Wt % W == 0, DimError,
              "upsample_mask: target " << Ht << "x" << Wt << " is not a multiple of " << H << "x"
                                       << W);
    const int64_t fh = Ht / H, fw = Wt / W;
    Tensor<T> out({B, C, Ht, Wt});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* src = m.data() + bc * H * W;
        T* dst = out.data() + bc * Ht * Wt;
        for (int64_t h = 0; h < Ht; ++h) {
            const T* srow = src + (h / fh) * W;
            T* drow = dst + h * Wt;
            for (int64_t w = 0; w < Wt; ++w) drow[w] = srow[w / fw];
        }
    }
    return out;
}

// Union (logical OR) of per-stage binary masks, each nearest-upsampled to the
// target extent. This is the model's overall spatial footprint and doubles as
// a mask-derived attribution map.
template <typename T>
Tensor<T> merged_mask(const std::map<int64_t, Tensor<T>>& masks, int64_t Ht, int64_t Wt) {
    AIM_CHECK(!masks.empty(), ArgError, "merged_mask: no masks given");
    Tensor<T> out;
    for (const auto& [stage, m] : masks) {
        Tensor<T> up = upsample_mask(m, Ht, Wt);
        if (!out.defined()) {
            out = up;
            continue;
        }
        AIM_CHECK(out.shape() == up.shape(), DimError,
                  "merged_mask: stage " << stage << " has mismatched batch/channel shape");
        for (int64_t i = 0; i < out.size(); ++i) {
            out[i] = (out[i] != T(0) || up[i] != T(0)) ? T(1) : T(0);
        }
    }
    return out;
}

}  // namespace aim

#endif  // AIM_MASKING_HPP
