// attribution.hpp — GradCAM, Energy Pointing Game scoring, merged masks as
// attribution maps, and worst-group accuracy reporting.
//
// Scoring runs entirely in double regardless of the model's scalar type:
// attribution maps are small and the metrics feed cross-run comparisons, so
// they should not depend on which precision the network used.

#ifndef AIM_ATTRIBUTION_HPP
#define AIM_ATTRIBUTION_HPP

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "aim/topdown.hpp"

namespace aim {

// A single-sample attribution map at input resolution, max-normalized to 1
// unless everything vanished (then all-zero with the degenerate flag set, so
// callers can exclude it from EPG averages instead of silently scoring 0).
struct Attribution {
    Tensor<double> map;  // [H, W], entries >= 0
    bool degenerate = false;
};

// Bilinear upsample of a rank-2 map using the half-pixel-center convention
// (source coordinate = (dst + 0.5) * scale - 0.5, edges clamped).
inline Tensor<double> bilinear_upsample(const Tensor<double>& src, int64_t H, int64_t W) {
    check_rank(src, 2, "bilinear_upsample");
    const int64_t h = src.dim(0), w = src.dim(1);
    Tensor<double> out({H, W});
    const double sy = double(h) / double(H), sx = double(w) / double(W);
    for (int64_t y = 0; y < H; ++y) {
        double fy = (double(y) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), double(h - 1));
        const int64_t y0 = int64_t(fy);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - double(y0);
        for (int64_t x = 0; x < W; ++x) {
            double fx = (double(x) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), double(w - 1));
            const int64_t x0 = int64_t(fx);
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - double(x0);
            out.at(y, x) = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                           wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
        }
    }
    return out;
}

// GradCAM for one sample from captured activations and their gradients:
// channel weights are spatially averaged gradients, the weighted channel sum
// is rectified, bilinearly upsampled to (H, W), and max-normalized.
template <typename T>
Attribution gradcam_from_capture(const Tensor<T>& act, const Tensor<T>& grad, int64_t sample,
                                 int64_t H, int64_t W) {
    check_rank(act, 4, "gradcam activations");
    AIM_CHECK(act.shape() == grad.shape(), DimError,
              "gradcam: activation shape " << shape_str(act.shape()) << " vs gradient "
                                           << shape_str(grad.shape()));
    const int64_t B = act.dim(0), C = act.dim(1), h = act.dim(2), w = act.dim(3);
    AIM_CHECK(sample >= 0 && sample < B, ArgError,
              "gradcam: sample " << sample << " out of range [0," << B << ")");
    const int64_t hw = h * w;
    std::vector<double> alpha(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        const T* gp = grad.data() + (sample * C + c) * hw;
        double s = 0;
        for (int64_t i = 0; i < hw; ++i) s += double(gp[i]);
        alpha[size_t(c)] = s / double(hw);
    }
    Tensor<double> cam({h, w});
    for (int64_t i = 0; i < hw; ++i) {
        double s = 0;
        for (int64_t c = 0; c < C; ++c) {
            s += alpha[size_t(c)] * double(act[(sample * C + c) * hw + i]);
        }
        cam[i] = s > 0 ? s : 0;  // ReLU
    }
    Attribution out;
    out.map = bilinear_upsample(cam, H, W);
    double mx = 0;
    for (int64_t i = 0; i < out.map.size(); ++i) mx = std::max(mx, out.map[i]);
    if (mx > 0) {
        for (int64_t i = 0; i < out.map.size(); ++i) out.map[i] /= mx;
    } else {
        out.degenerate = true;
    }
    return out;
}

// Which feature map GradCAM reads.
struct GradcamTap {
    enum class Kind { kBackbone, kStage, kFused };
    Kind kind = Kind::kFused;
    int64_t index = 0;  // stage index for kBackbone / kStage
};

// "auto" policy: the classifier's immediate spatial input for plain models
// (last backbone stage / the fused map), the termination stage's masked
// output for top-down models.
inline GradcamTap default_gradcam_tap(const ModelConfig& cfg) {
    GradcamTap tap;
    switch (cfg.topdown.variant) {
        case Variant::kTopdown:
        case Variant::kSingleEstimator:
            tap.kind = GradcamTap::Kind::kStage;
            tap.index = cfg.topdown.termination_stage;
            break;
        case Variant::kBottomUp:
        case Variant::kBaseline:
            tap.kind = GradcamTap::Kind::kFused;
            break;
    }
    return tap;
}

template <typename T>
Var<T> gradcam_tap_var(const ModelOutputs<T>& out, const GradcamTap& tap) {
    switch (tap.kind) {
        case GradcamTap::Kind::kBackbone:
            AIM_CHECK(tap.index >= 0 && tap.index < int64_t(out.backbone_feats.size()), ArgError,
                      "gradcam: backbone stage " << tap.index << " out of range");
            return out.backbone_feats[size_t(tap.index)];
        case GradcamTap::Kind::kStage: {
            const auto it = out.stage_outputs.find(tap.index);
            AIM_CHECK(it != out.stage_outputs.end(), ArgError,
                      "gradcam: no masked stage output at stage " << tap.index);
            return it->second;
        }
        case GradcamTap::Kind::kFused: return out.fused;
    }
    AIM_THROW(ArgError, "gradcam: bad tap");
}

// Full GradCAM pass: eval-mode forward, backward from the summed target
// class scores, one attribution per sample at (H, W) = input resolution.
template <typename T>
std::vector<Attribution> gradcam(Model<T>& model, const Tensor<T>& images,
                                 const std::vector<int64_t>& target_classes,
                                 const GradcamTap& tap) {
    check_rank(images, 4, "gradcam images");
    const int64_t B = images.dim(0);
    AIM_CHECK(int64_t(target_classes.size()) == B, DimError,
              "gradcam: " << target_classes.size() << " targets for batch " << B);
    for (int64_t c : target_classes) {
        AIM_CHECK(c >= 0 && c < model.config().num_classes, ArgError,
                  "gradcam: class " << c << " out of range [0," << model.config().num_classes
                                    << ")");
    }
    auto out = model.forward(images, Mode::kEval, nullptr);
    Graph<T>& g = *out.graph;
    Var<T> tapped = gradcam_tap_var(out, tap);
    Var<T> score = ops::class_score_sum(g, out.final_logits, target_classes);
    g.tape.backward(score.id);
    AIM_CHECK(g.tape.has_grad(tapped.id), ArgError,
              "gradcam: selected layer received no gradient from the class score");
    const Tensor<T>& act = tapped.val();
    const Tensor<T>& grad = g.tape.grad(tapped.id);
    const int64_t H = images.dim(2), W = images.dim(3);
    std::vector<Attribution> maps;
    maps.reserve(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) maps.push_back(gradcam_from_capture(act, grad, b, H, W));
    return maps;
}

// Energy Pointing Game: the fraction of attribution energy falling inside
// the ground-truth foreground. gt entries must be exactly 0 or 1.
inline double epg(const Tensor<double>& attr, const Tensor<double>& gt) {
    check_rank(attr, 2, "epg attribution");
    AIM_CHECK(attr.shape() == gt.shape(), DimError,
              "epg: attribution " << shape_str(attr.shape()) << " vs ground truth "
                                  << shape_str(gt.shape()));
    double inside = 0, total = 0, active = 0;
    for (int64_t i = 0; i < attr.size(); ++i) {
        const double a = attr[i], m = gt[i];
        AIM_CHECK(std::isfinite(a) && a >= 0, NumericError,
                  "epg: attribution must be finite and nonnegative, got " << a);
        AIM_CHECK(m == 0.0 || m == 1.0, ArgError, "epg: ground truth entry " << m
                                                  << " is not binary");
        total += a;
        inside += a * m;
        active += m;
    }
    AIM_CHECK(active > 0, ArgError, "epg: ground-truth mask has no active elements");
    AIM_CHECK(total > 0, DegenerateScoreError, "epg: all-zero attribution map");
    return inside / total;
}

// Rank-2 [H,W] slice of one (sample, channel) plane.
template <typename T>
Tensor<double> slice_hw(const Tensor<T>& t, int64_t b, int64_t c) {
    check_rank(t, 4, "slice_hw");
    const int64_t H = t.dim(2), W = t.dim(3);
    Tensor<double> out({H, W});
    const T* src = t.data() + (b * t.dim(1) + c) * H * W;
    for (int64_t i = 0; i < H * W; ++i) out[i] = double(src[i]);
    return out;
}

// EPG of the merged stage mask treated as a (binary) attribution map.
template <typename T>
double mask_epg(const ModelOutputs<T>& out, const Tensor<double>& gt, int64_t sample,
                int64_t input_size) {
    Tensor<T> merged = merged_mask(out, input_size, input_size);
    return epg(slice_hw(merged, sample, 0), gt);
}

// Per-group accuracy report. Groups listed in `expected_groups` but absent
// from the data are reported as empty (and excluded from worst/overall).
struct GroupReport {
    std::map<int64_t, double> per_group;
    std::map<int64_t, int64_t> group_sizes;
    std::vector<int64_t> empty_groups;
    double worst = 0.0;
    double best = 0.0;
    double overall = 0.0;
};

inline GroupReport worst_group_accuracy(const std::vector<int64_t>& predictions,
                                        const std::vector<int64_t>& labels,
                                        const std::vector<int64_t>& groups,
                                        const std::vector<int64_t>& expected_groups = {}) {
    AIM_CHECK(predictions.size() == labels.size() && labels.size() == groups.size(), DimError,
              "worst_group_accuracy: size mismatch (" << predictions.size() << " predictions, "
                                                      << labels.size() << " labels, "
                                                      << groups.size() << " groups)");
    AIM_CHECK(!predictions.empty(), ArgError, "worst_group_accuracy: no samples");
    GroupReport rep;
    std::map<int64_t, int64_t> correct;
    int64_t total_correct = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        rep.group_sizes[groups[i]] += 1;
        const bool ok = predictions[i] == labels[i];
        correct[groups[i]] += ok ? 1 : 0;
        total_correct += ok ? 1 : 0;
    }
    rep.worst = 1.0;
    rep.best = 0.0;
    for (const auto& [gid, n] : rep.group_sizes) {
        const double acc = double(correct[gid]) / double(n);
        rep.per_group[gid] = acc;
        rep.worst = std::min(rep.worst, acc);
        rep.best = std::max(rep.best, acc);
    }
    rep.overall = double(total_correct) / double(predictions.size());
    for (int64_t gid : expected_groups) {
        if (rep.group_sizes.count(gid) == 0) rep.empty_groups.push_back(gid);
    }
    return rep;
}

// One row of the per-sample EPG scatter table (baseline vs AIM comparison).
struct EpgScatterRecord {
    int64_t sample = 0;
    double epg_baseline = 0.0;
    double epg_aim = 0.0;
    int64_t group = 0;
    bool correct = false;
};

inline void write_epg_scatter(const std::string& path,
                              const std::vector<EpgScatterRecord>& records) {
    std::ofstream f(path);
    AIM_CHECK(f.good(), IoError, "cannot open " << path << " for writing");
    f << "sample,epg_baseline,epg_aim,group,correct\n";
    char buf[64];
    for (const auto& r : records) {
        f << r.sample << ",";
        std::snprintf(buf, sizeof buf, "%.17g", r.epg_baseline);
        f << buf << ",";
        std::snprintf(buf, sizeof buf, "%.17g", r.epg_aim);
        f << buf << "," << r.group << "," << (r.correct ? 1 : 0) << "\n";
    }
    AIM_CHECK(f.good(), IoError, "failed writing " << path);
}

}  // namespace aim

#endif  // AIM_ATTRIBUTION_HPP
