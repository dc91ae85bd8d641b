// topdown.hpp — the full model: backbone + masked top-down pathway.
//
// Default (topdown) wiring, traversing stages from the deepest down to the
// termination stage:
//
//   A_l = estimator_l(S_l)           single-channel logit map
//   B_l = gate(A_l)                  binary mask
//   O_l = transform_l(S_l) ⊙ B_l     masked lateral features
//   aux_l = head_l(O_l)              stage classifier (before fusion)
//   carry = O_l                      at the deepest stage
//   carry = up2(carry) + O_l         below it (nearest-neighbour + sum)
//
// and the final classifier reads the fused map at the termination stage.
// Variants: single_estimator keeps one estimator at the deepest stage and
// upsamples its binary mask down the chain; bottom_up drops the top-down
// pathway entirely and gates configured backbone stage outputs in place;
// baseline is the plain backbone classifier.

#ifndef AIM_TOPDOWN_HPP
#define AIM_TOPDOWN_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "aim/backbone.hpp"
#include "aim/masking.hpp"

namespace aim {

enum class Variant { kTopdown, kBottomUp, kSingleEstimator, kBaseline };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kTopdown: return "topdown";
        case Variant::kBottomUp: return "bottom_up";
        case Variant::kSingleEstimator: return "single_estimator";
        case Variant::kBaseline: return "baseline";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "topdown") return Variant::kTopdown;
    if (s == "bottom_up") return Variant::kBottomUp;
    if (s == "single_estimator") return Variant::kSingleEstimator;
    if (s == "baseline") return Variant::kBaseline;
    AIM_THROW(ConfigError, "unknown variant '" << s
                           << "' (expected topdown|bottom_up|single_estimator|baseline)");
}

struct TopDownConfig {
    int64_t termination_stage = 2;
    int64_t fused_channels = 128;
    Variant variant = Variant::kTopdown;
    bool use_auxiliary_losses = true;
    std::vector<int64_t> bottom_up_masked_stages = {1, 2, 3};

    void validate(int64_t num_stages) const {
        AIM_CHECK(fused_channels >= 1, ConfigError,
                  "topdown: fused_channels must be >= 1, got " << fused_channels);
        if (variant == Variant::kTopdown || variant == Variant::kSingleEstimator) {
            AIM_CHECK(termination_stage >= 0 && termination_stage < num_stages, ConfigError,
                      "topdown: termination_stage " << termination_stage
                                                    << " out of range [0," << num_stages << ")");
        }
        if (variant == Variant::kBottomUp) {
            AIM_CHECK(!bottom_up_masked_stages.empty(), ConfigError,
                      "topdown: bottom_up variant needs at least one masked stage");
            for (int64_t s : bottom_up_masked_stages) {
                AIM_CHECK(s >= 0 && s < num_stages, ConfigError,
                          "topdown: bottom_up masked stage " << s << " out of range [0,"
                                                             << num_stages << ")");
            }
        }
    }
};

struct ModelConfig {
    BackboneConfig backbone;
    MaskEstimatorConfig estimator;
    GateConfig gate;
    TopDownConfig topdown;
    int64_t num_classes = 4;
    double dropout = 0.0;

    void validate() const {
        backbone.validate();
        estimator.validate();
        gate.validate();
        topdown.validate(backbone.num_stages());
        AIM_CHECK(num_classes >= 2, ConfigError,
                  "model: num_classes must be >= 2, got " << num_classes);
        AIM_CHECK(dropout >= 0.0 && dropout < 1.0, ConfigError,
                  "model: dropout must be in [0,1), got " << dropout);
    }
};

// How masks are applied during a forward pass. kForceOnes swaps every mask
// for constant ones (still multiplying); kBypass skips the multiplication.
// Comparing the two exercises exact mask-transparency.
enum class MaskProbe { kNormal, kForceOnes, kBypass };

struct ForwardOptions {
    MaskProbe probe = MaskProbe::kNormal;
    bool input_needs_grad = false;
};

template <typename T>
struct ModelOutputs {
    std::shared_ptr<Graph<T>> graph;
    Var<T> final_logits;                      // [B, num_classes]
    std::map<int64_t, Var<T>> stage_logits;   // stage -> auxiliary [B, num_classes]
    std::map<int64_t, Var<T>> mask_logits;    // stage -> pre-gate logit map
    std::map<int64_t, Var<T>> masks;          // stage -> binary mask [B,1,h,w]
    std::map<int64_t, std::vector<double>> active_ratios;  // stage -> per-sample fraction
    std::map<int64_t, Var<T>> stage_outputs;  // stage -> masked features O_l
    Var<T> fused;                             // classifier input map
    std::vector<Var<T>> backbone_feats;

    // Mask value tensors (for merged-mask attribution).
    std::map<int64_t, Tensor<T>> mask_values() const {
        std::map<int64_t, Tensor<T>> out;
        for (const auto& [s, v] : masks) out.emplace(s, v.val());
        return out;
    }
};

// Union of a forward pass's stage masks at the requested spatial extent.
template <typename T>
Tensor<T> merged_mask(const ModelOutputs<T>& outputs, int64_t Ht, int64_t Wt) {
    return merged_mask(outputs.mask_values(), Ht, Wt);
}

template <typename T>
class Model {
  public:
    Model(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng = Rng::child(init_seed, /*stream=*/0xA11);
        backbone_ = std::make_unique<Backbone<T>>(cfg.backbone, rng);
        const int64_t S = cfg.backbone.num_stages();
        const auto& td = cfg.topdown;

        switch (td.variant) {
            case Variant::kTopdown:
            case Variant::kSingleEstimator: {
                for (int64_t l = td.termination_stage; l < S; ++l) traversed_.push_back(l);
                for (int64_t l : traversed_) {
                    transforms_.emplace(l, Transform(cfg, l, rng));
                }
                if (td.variant == Variant::kSingleEstimator) {
                    const int64_t deepest = S - 1;
                    estimators_.emplace(
                        deepest,
                        MaskEstimator<T>("estimator.s" + std::to_string(deepest), cfg.estimator,
                                         cfg.backbone.stage_channels[size_t(deepest)], rng));
                } else {
                    for (int64_t l : traversed_) {
                        estimators_.emplace(
                            l, MaskEstimator<T>("estimator.s" + std::to_string(l), cfg.estimator,
                                                cfg.backbone.stage_channels[size_t(l)], rng));
                    }
                }
                if (td.use_auxiliary_losses) {
                    for (int64_t l : traversed_) {
                        aux_heads_.emplace(l, nn::Linear<T>("aux_head.s" + std::to_string(l),
                                                            td.fused_channels, cfg.num_classes,
                                                            ParamGroup::kTopdown, rng));
                    }
                }
                final_head_ = nn::Linear<T>("final_head", td.fused_channels, cfg.num_classes,
                                            ParamGroup::kTopdown, rng);
                break;
            }
            case Variant::kBottomUp: {
                traversed_ = td.bottom_up_masked_stages;
                std::sort(traversed_.begin(), traversed_.end());
                traversed_.erase(std::unique(traversed_.begin(), traversed_.end()),
                                 traversed_.end());
                for (int64_t l : traversed_) {
                    estimators_.emplace(
                        l, MaskEstimator<T>("estimator.s" + std::to_string(l), cfg.estimator,
                                            cfg.backbone.stage_channels[size_t(l)], rng));
                }
                if (td.use_auxiliary_losses) {
                    for (int64_t l : traversed_) {
                        aux_heads_.emplace(
                            l, nn::Linear<T>("aux_head.s" + std::to_string(l),
                                             cfg.backbone.stage_channels[size_t(l)],
                                             cfg.num_classes, ParamGroup::kTopdown, rng));
                    }
                }
                final_head_ = nn::Linear<T>("final_head", cfg.backbone.stage_channels.back(),
                                            cfg.num_classes, ParamGroup::kTopdown, rng);
                break;
            }
            case Variant::kBaseline: {
                final_head_ = nn::Linear<T>("final_head", cfg.backbone.stage_channels.back(),
                                            cfg.num_classes, ParamGroup::kTopdown, rng);
                break;
            }
        }
    }

    const ModelConfig& config() const { return cfg_; }

    // Stages carrying a mask, in ascending order.
    const std::vector<int64_t>& masked_stages() const { return traversed_; }

    ModelOutputs<T> forward(const Tensor<T>& images, Mode mode, Rng* gate_rng,
                            const ForwardOptions& opts = {}) {
        check_rank(images, 4, "model input");
        ModelOutputs<T> out;
        out.graph = std::make_shared<Graph<T>>();
        Graph<T>& g = *out.graph;
        g.mode = mode;
        g.rng = gate_rng;
        Var<T> x = g.input(images.clone(), opts.input_needs_grad);

        switch (cfg_.topdown.variant) {
            case Variant::kTopdown:
            case Variant::kSingleEstimator: forward_topdown(g, x, out, opts); break;
            case Variant::kBottomUp: forward_bottom_up(g, x, out, opts); break;
            case Variant::kBaseline: {
                out.backbone_feats = backbone_->forward_stages(g, x);
                out.fused = out.backbone_feats.back();
                out.final_logits = head(g, final_head_, out.fused);
                break;
            }
        }
        for (const auto& [s, m] : out.masks) out.active_ratios.emplace(s, active_ratio(m.val()));
        return out;
    }

    std::vector<Param<T>*> parameters() {
        std::vector<Param<T>*> out;
        backbone_->collect_params(out);
        for (auto& [l, tr] : transforms_) tr.collect(out);
        for (auto& [l, est] : estimators_) est.collect_params(out);
        for (auto& [l, h] : aux_heads_) h.collect(out);
        final_head_.collect(out);
        return out;
    }

    Backbone<T>& backbone() { return *backbone_; }

  private:
    // 1x1 reduce -> 3x3 conv -> channel LayerNorm -> GELU.
    struct Transform {
        nn::Conv2d<T> reduce, conv;
        nn::Norm<T> norm;

        Transform(const ModelConfig& cfg, int64_t stage, Rng& rng) {
            const std::string name = "transform.s" + std::to_string(stage);
            const int64_t in_c = cfg.backbone.stage_channels[size_t(stage)];
            const int64_t f = cfg.topdown.fused_channels;
            reduce = nn::Conv2d<T>(name + ".reduce", in_c, f, 1, 1, 0, ParamGroup::kTopdown, rng);
            conv = nn::Conv2d<T>(name + ".conv", f, f, 3, 1, 1, ParamGroup::kTopdown, rng);
            norm = nn::Norm<T>(name + ".norm", f, nn::NormKind::kChannel, cfg.backbone.norm_eps,
                               ParamGroup::kTopdown);
        }

        Var<T> operator()(Graph<T>& g, Var<T> x) {
            return ops::gelu(g, norm(g, conv(g, reduce(g, x))));
        }

        void collect(std::vector<Param<T>*>& out) {
            reduce.collect(out);
            conv.collect(out);
            norm.collect(out);
        }
    };

    Var<T> head(Graph<T>& g, nn::Linear<T>& fc, Var<T> feat4d) {
        Var<T> pooled = ops::gap(g, feat4d);
        pooled = ops::dropout(g, pooled, cfg_.dropout);
        return fc(g, pooled);
    }

    // Gate a logit map (or pass through a probe) and apply it to features.
    Var<T> gate_and_apply(Graph<T>& g, Var<T> features, Var<T> mask, const ForwardOptions& opts) {
        if (opts.probe == MaskProbe::kBypass) return features;
        return apply_mask(g, features, mask);
    }

    Var<T> make_mask(Graph<T>& g, Var<T> logits, const ForwardOptions& opts) {
        if (opts.probe == MaskProbe::kForceOnes) {
            const auto& s = logits.val().shape();
            return g.constant(Tensor<T>::full(s, T(1)));
        }
        return gumbel_binarize(g, logits, cfg_.gate);
    }

    void forward_topdown(Graph<T>& g, Var<T> images, ModelOutputs<T>& out,
                         const ForwardOptions& opts) {
        out.backbone_feats = backbone_->forward_stages(g, images);
        const int64_t S = cfg_.backbone.num_stages();
        const int64_t term = cfg_.topdown.termination_stage;
        const bool single = cfg_.topdown.variant == Variant::kSingleEstimator;
        Var<T> carry;
        Var<T> prev_mask;
        for (int64_t l = S - 1; l >= term; --l) {
            Var<T> lateral = transforms_.at(l)(g, out.backbone_feats[size_t(l)]);
            Var<T> mask;
            if (opts.probe != MaskProbe::kBypass) {
                if (single && l < S - 1) {
                    // Reuse the deepest mask, nearest-upsampled one hop.
                    mask = ops::upsample_nearest2(g, prev_mask);
                } else {
                    Var<T> logits = estimators_.at(single ? S - 1 : l)(
                        g, out.backbone_feats[size_t(l)]);
                    out.mask_logits.emplace(l, logits);
                    mask = make_mask(g, logits, opts);
                }
                out.masks.emplace(l, mask);
                prev_mask = mask;
            }
            Var<T> o = gate_and_apply(g, lateral, mask, opts);
            out.stage_outputs.emplace(l, o);
            if (cfg_.topdown.use_auxiliary_losses) {
                out.stage_logits.emplace(l, head(g, aux_heads_.at(l), o));
            }
            carry = (l == S - 1) ? o : ops::add(g, ops::upsample_nearest2(g, carry), o);
        }
        out.fused = carry;
        out.final_logits = head(g, final_head_, carry);
    }

    void forward_bottom_up(Graph<T>& g, Var<T> images, ModelOutputs<T>& out,
                           const ForwardOptions& opts) {
        const int64_t S = cfg_.backbone.num_stages();
        Var<T> x = images;
        for (int64_t s = 0; s < S; ++s) {
            x = backbone_->forward_stage(g, x, s);
            out.backbone_feats.push_back(x);
            if (estimators_.count(s)) {
                if (opts.probe != MaskProbe::kBypass) {
                    Var<T> logits = estimators_.at(s)(g, x);
                    out.mask_logits.emplace(s, logits);
                    Var<T> mask = make_mask(g, logits, opts);
                    out.masks.emplace(s, mask);
                    x = apply_mask(g, x, mask);
                }
                out.stage_outputs.emplace(s, x);
                if (cfg_.topdown.use_auxiliary_losses) {
                    out.stage_logits.emplace(s, head(g, aux_heads_.at(s), x));
                }
            }
        }
        out.fused = x;
        out.final_logits = head(g, final_head_, x);
    }

    ModelConfig cfg_;
    std::unique_ptr<Backbone<T>> backbone_;
    std::vector<int64_t> traversed_;
    std::map<int64_t, Transform> transforms_;
    std::map<int64_t, MaskEstimator<T>> estimators_;
    std::map<int64_t, nn::Linear<T>> aux_heads_;
    nn::Linear<T> final_head_;
};

}  // namespace aim

#endif  // AIM_TOPDOWN_HPP
