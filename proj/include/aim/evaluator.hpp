// evaluator.hpp — deterministic split evaluation: accuracy, group report,
// loss terms, per-stage active ratios, EPG scoring (merged masks + GradCAM),
// mask/attribution image export, and the baseline-vs-AIM comparison table.

#ifndef AIM_EVALUATOR_HPP
#define AIM_EVALUATOR_HPP

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "aim/attribution.hpp"
#include "aim/checkpoint.hpp"
#include "aim/config.hpp"
#include "aim/losses.hpp"

namespace aim {

// eval.gradcam_layer strings: auto | fused | backbone:<i> | stage:<i>.
inline GradcamTap parse_gradcam_layer(const std::string& s, const ModelConfig& cfg) {
    if (s == "auto") return default_gradcam_tap(cfg);
    if (s == "fused") return {GradcamTap::Kind::kFused, 0};
    const size_t colon = s.find(':');
    if (colon != std::string::npos) {
        const std::string kind = s.substr(0, colon);
        const int64_t idx = detail::parse_int_field(s.substr(colon + 1), "gradcam_layer", 0);
        if (kind == "backbone") return {GradcamTap::Kind::kBackbone, idx};
        if (kind == "stage") return {GradcamTap::Kind::kStage, idx};
    }
    AIM_THROW(ConfigError, "eval: bad gradcam_layer '" << s
                           << "' (expected auto|fused|backbone:<i>|stage:<i>)");
}

struct EvalReport {
    int64_t samples = 0;
    double accuracy = 0.0;
    double worst_group = 0.0;
    GroupReport groups;
    double loss_total = 0.0, loss_final = 0.0, loss_stage = 0.0, loss_mask = 0.0;
    std::map<int64_t, double> active;  // masked stage -> mean active ratio
    double tau = 1.0;

    // EPG block; valid only when has_epg (needs ground-truth masks).
    bool has_epg = false;
    double mask_epg_mean = 0.0;     // masked variants only (NaN otherwise)
    double gradcam_epg_mean = 0.0;  // all variants
    int64_t mask_epg_count = 0, gradcam_epg_count = 0;
    int64_t mask_epg_degenerate = 0, gradcam_epg_degenerate = 0;
    int64_t missing_masks = 0;

    // Per-sample rows aligned with the split's manifest order, for compare.
    std::vector<int64_t> record_indices;
    std::vector<int64_t> labels, predictions, group_ids;
    std::vector<double> per_sample_epg;  // mask-EPG if masked else GradCAM-EPG; NaN if undefined
};

namespace detail {

// Batch of decoded samples cropped to the model input, kept together so gt
// masks always receive the same geometry as the images.
struct EvalBatch {
    Tensor<float> images;
    std::vector<int64_t> labels, groups;
    std::vector<Tensor<double>> gts;  // empty tensor when the record has none
    std::vector<int64_t> records;
};

inline EvalBatch load_eval_batch(const Manifest& m, const std::vector<size_t>& idx, size_t lo,
                                 size_t hi, int64_t input_size, int64_t deviation, Rng* crop_rng) {
    EvalBatch batch;
    const int64_t B = int64_t(hi - lo);
    batch.images = Tensor<float>({B, 3, input_size, input_size});
    for (size_t k = lo; k < hi; ++k) {
        Sample s = load_sample(m, idx[k]);
        if (s.image.dim(1) != input_size || s.image.dim(2) != input_size || deviation > 0) {
            AIM_CHECK(crop_rng != nullptr, ConfigError, "evaluator: crop requires an RNG");
            shifted_center_crop(s, input_size, deviation, *crop_rng);
        }
        const int64_t b = int64_t(k - lo);
        std::memcpy(batch.images.data() + b * 3 * input_size * input_size, s.image.data(),
                    size_t(3 * input_size * input_size) * sizeof(float));
        batch.labels.push_back(s.label);
        batch.groups.push_back(s.group);
        batch.gts.push_back(s.has_mask ? s.gt_mask.cast<double>() : Tensor<double>());
        batch.records.push_back(int64_t(idx[k]));
    }
    return batch;
}

}  // namespace detail

// Deterministic evaluation of one split. `epoch` selects the τ used for the
// logged loss terms; `with_epg` adds the attribution scoring passes.
inline EvalReport evaluate_split(Model<float>& model, const Manifest& manifest,
                                 const std::string& split, const RunConfig& cfg, int64_t epoch,
                                 bool with_epg) {
    const std::vector<size_t> idx = split_indices(manifest, split);
    AIM_CHECK(!idx.empty(), ArgError, "evaluate: split '" << split << "' has no records");
    const int64_t input = cfg.model.backbone.input_size;
    const bool masked = cfg.model.topdown.variant != Variant::kBaseline;
    const GradcamTap tap = parse_gradcam_layer(cfg.eval.gradcam_layer, cfg.model);
    Rng crop_rng = Rng::child(cfg.seed, 0xE7A1);

    EvalReport rep;
    rep.tau = anneal_tau(epoch, cfg.anneal);
    std::map<int64_t, double> ratio_sums;
    double mask_epg_sum = 0.0, gradcam_epg_sum = 0.0;
    const double nan = std::numeric_limits<double>::quiet_NaN();

    const size_t bs = size_t(cfg.optimizer.batch_size);
    for (size_t lo = 0; lo < idx.size(); lo += bs) {
        const size_t hi = std::min(idx.size(), lo + bs);
        detail::EvalBatch batch = detail::load_eval_batch(manifest, idx, lo, hi, input,
                                                          cfg.eval.shifted_crop_deviation,
                                                          &crop_rng);
        auto out = model.forward(batch.images, Mode::kEval, nullptr);
        LossBreakdown<float> bd =
            build_total_loss(*out.graph, out, batch.labels, cfg.loss, epoch, cfg.anneal);
        const int64_t B = int64_t(hi - lo);
        rep.loss_total += bd.total_value() * double(B);
        rep.loss_final += bd.final_cls * double(B);
        for (const auto& [stage, v] : bd.stage_cls) rep.loss_stage += v * double(B);
        for (const auto& [stage, v] : bd.mask) rep.loss_mask += v * double(B);

        const Tensor<float>& logits = out.final_logits.val();
        for (int64_t b = 0; b < B; ++b) {
            int64_t arg = 0;
            for (int64_t c = 1; c < cfg.model.num_classes; ++c) {
                if (logits.at(b, c) > logits.at(b, arg)) arg = c;
            }
            rep.predictions.push_back(arg);
            rep.labels.push_back(batch.labels[size_t(b)]);
            rep.group_ids.push_back(batch.groups[size_t(b)]);
            rep.record_indices.push_back(batch.records[size_t(b)]);
        }
        for (const auto& [stage, ratios] : out.active_ratios) {
            for (double r : ratios) ratio_sums[stage] += r;
        }

        if (with_epg) {
            Tensor<float> merged;
            if (masked) merged = merged_mask(out, input, input);
            std::vector<Attribution> cams = gradcam(model, batch.images, batch.labels, tap);
            for (int64_t b = 0; b < B; ++b) {
                double primary = nan;
                if (!batch.gts[size_t(b)].defined()) {
                    ++rep.missing_masks;
                    rep.per_sample_epg.push_back(primary);
                    continue;
                }
                const Tensor<double>& gt = batch.gts[size_t(b)];
                if (masked) {
                    try {
                        const double e = epg(slice_hw(merged, b, 0), gt);
                        mask_epg_sum += e;
                        ++rep.mask_epg_count;
                        primary = e;
                    } catch (const DegenerateScoreError&) {
                        ++rep.mask_epg_degenerate;
                    }
                }
                if (cams[size_t(b)].degenerate) {
                    ++rep.gradcam_epg_degenerate;
                } else {
                    const double e = epg(cams[size_t(b)].map, gt);
                    gradcam_epg_sum += e;
                    ++rep.gradcam_epg_count;
                    if (!masked) primary = e;
                }
                rep.per_sample_epg.push_back(primary);
            }
        }
    }

    rep.samples = int64_t(rep.labels.size());
    rep.groups = worst_group_accuracy(rep.predictions, rep.labels, rep.group_ids,
                                      all_groups(cfg.model.num_classes));
    rep.accuracy = rep.groups.overall;
    // Selection rule: worst group when the split actually has groups to compare.
    rep.worst_group = rep.groups.per_group.size() > 1 ? rep.groups.worst : rep.accuracy;
    rep.loss_total /= double(rep.samples);
    rep.loss_final /= double(rep.samples);
    rep.loss_stage /= double(rep.samples);
    rep.loss_mask /= double(rep.samples);
    for (const auto& [stage, sum] : ratio_sums) rep.active[stage] = sum / double(rep.samples);
    if (with_epg) {
        rep.has_epg = rep.mask_epg_count + rep.gradcam_epg_count > 0;
        rep.mask_epg_mean = rep.mask_epg_count > 0 ? mask_epg_sum / double(rep.mask_epg_count)
                                                   : nan;
        rep.gradcam_epg_mean =
            rep.gradcam_epg_count > 0 ? gradcam_epg_sum / double(rep.gradcam_epg_count) : nan;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Image export
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor<uint8_t> to_u8_image(const Tensor<float>& img, int64_t b) {
    const int64_t H = img.dim(2), W = img.dim(3);
    Tensor<uint8_t> out({3, H, W});
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t i = 0; i < H * W; ++i) {
            out[c * H * W + i] = quantize(double(img[((b * 3 + c) * H) * W + i]));
        }
    }
    return out;
}

inline Tensor<uint8_t> mask_to_u8(const Tensor<float>& mask, int64_t b) {
    const int64_t H = mask.dim(2), W = mask.dim(3);
    Tensor<uint8_t> out({H, W});
    for (int64_t i = 0; i < H * W; ++i) out[i] = mask[(b * 1 * H) * W + i] > 0.5f ? 255 : 0;
    return out;
}

// Blue-to-red heat overlay at half opacity over the input.
inline Tensor<uint8_t> overlay_heat(const Tensor<float>& img, int64_t b,
                                    const Tensor<double>& heat) {
    const int64_t H = heat.dim(0), W = heat.dim(1);
    Tensor<uint8_t> out({3, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        const double h = heat[i];
        const double color[3] = {h, 0.15 * h, 1.0 - h};
        for (int64_t c = 0; c < 3; ++c) {
            const double base = double(img[((b * 3 + c) * H) * W + i]);
            out[c * H * W + i] = quantize(0.5 * base + 0.5 * color[c]);
        }
    }
    return out;
}

}  // namespace detail

// Writes input, per-stage masks (nearest-upsampled), merged mask, and GradCAM
// overlay images for the first `count` samples of the split.
inline std::vector<std::string> export_masks(Model<float>& model, const Manifest& manifest,
                                             const std::string& split, const RunConfig& cfg,
                                             int64_t count, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    AIM_CHECK(!ec, IoError, "cannot create " << out_dir << ": " << ec.message());
    const std::vector<size_t> idx = split_indices(manifest, split);
    AIM_CHECK(!idx.empty(), ArgError, "export-masks: split '" << split << "' has no records");
    const size_t n = std::min(size_t(count), idx.size());
    const int64_t input = cfg.model.backbone.input_size;
    const GradcamTap tap = parse_gradcam_layer(cfg.eval.gradcam_layer, cfg.model);
    Rng crop_rng = Rng::child(cfg.seed, 0xE7A1);

    detail::EvalBatch batch = detail::load_eval_batch(manifest, idx, 0, n, input,
                                                      cfg.eval.shifted_crop_deviation, &crop_rng);
    auto out = model.forward(batch.images, Mode::kEval, nullptr);
    std::vector<Attribution> cams = gradcam(model, batch.images, batch.labels, tap);
    const bool masked = cfg.model.topdown.variant != Variant::kBaseline;
    Tensor<float> merged;
    if (masked) merged = merged_mask(out, input, input);

    std::vector<std::string> written;
    auto emit = [&](const std::string& name) {
        written.push_back((fs::path(out_dir) / name).string());
        return written.back();
    };
    for (size_t b = 0; b < n; ++b) {
        const std::string stem = "sample" + std::to_string(batch.records[b]);
        write_ppm(emit(stem + "_input.ppm"), detail::to_u8_image(batch.images, int64_t(b)));
        for (const auto& [stage, mask] : out.masks) {
            Tensor<float> up = upsample_mask(mask.val(), input, input);
            write_pgm(emit(stem + "_stage" + std::to_string(stage) + "_mask.pgm"),
                      detail::mask_to_u8(up, int64_t(b)));
        }
        if (masked) {
            write_pgm(emit(stem + "_merged.pgm"), detail::mask_to_u8(merged, int64_t(b)));
        }
        write_ppm(emit(stem + "_gradcam.ppm"),
                  detail::overlay_heat(batch.images, int64_t(b), cams[b].map));
    }
    return written;
}

// ---------------------------------------------------------------------------
// Baseline vs AIM comparison
// ---------------------------------------------------------------------------

// Pairs the two models' per-sample EPG scores over the same split (manifest
// order). Samples where either score is undefined are skipped and counted.
struct CompareResult {
    std::vector<EpgScatterRecord> records;
    int64_t skipped = 0;
    double mean_epg_baseline = 0.0, mean_epg_aim = 0.0;
};

inline CompareResult compare_runs(Model<float>& baseline_model, const RunConfig& baseline_cfg,
                                  Model<float>& aim_model, const RunConfig& aim_cfg,
                                  const Manifest& manifest, const std::string& split,
                                  int64_t epoch) {
    EvalReport base = evaluate_split(baseline_model, manifest, split, baseline_cfg, epoch, true);
    EvalReport aim = evaluate_split(aim_model, manifest, split, aim_cfg, epoch, true);
    AIM_CHECK(base.record_indices == aim.record_indices, ArgError,
              "compare: the two runs saw different sample sets");
    CompareResult res;
    for (size_t i = 0; i < base.per_sample_epg.size(); ++i) {
        const double eb = base.per_sample_epg[i], ea = aim.per_sample_epg[i];
        if (std::isnan(eb) || std::isnan(ea)) {
            ++res.skipped;
            continue;
        }
        EpgScatterRecord rec;
        rec.sample = base.record_indices[i];
        rec.epg_baseline = eb;
        rec.epg_aim = ea;
        rec.group = aim.group_ids[i];
        rec.correct = aim.predictions[i] == aim.labels[i];
        res.records.push_back(rec);
        res.mean_epg_baseline += eb;
        res.mean_epg_aim += ea;
    }
    if (!res.records.empty()) {
        res.mean_epg_baseline /= double(res.records.size());
        res.mean_epg_aim /= double(res.records.size());
    }
    return res;
}

}  // namespace aim

#endif  // AIM_EVALUATOR_HPP
