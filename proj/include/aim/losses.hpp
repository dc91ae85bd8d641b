// losses.hpp — classification loss (label smoothing), active-area loss,
// their weighted total, and the threshold-annealing schedule.
//
// Two layers live here. The pure double-precision functions are the
// reference definitions the tests pin down; build_total_loss composes the
// same arithmetic on the autodiff tape for training. The active-area target
// τ anneals linearly from 1.0 (fully active) to its final value, so early
// training sees unmasked features and sparsity pressure arrives gradually.

#ifndef AIM_LOSSES_HPP
#define AIM_LOSSES_HPP

#include <cmath>
#include <map>
#include <vector>

#include "aim/topdown.hpp"

namespace aim {

struct LossConfig {
    double lambda_mask = 6.0;
    double label_smoothing = 0.05;
    std::map<int64_t, double> tau_targets;  // per-stage final τ overrides
    bool use_auxiliary_losses = true;

    void validate() const {
        AIM_CHECK(lambda_mask > 0.0, ConfigError,
                  "loss: lambda_mask must be positive, got " << lambda_mask);
        AIM_CHECK(label_smoothing >= 0.0 && label_smoothing < 1.0, ConfigError,
                  "loss: label_smoothing must be in [0,1), got " << label_smoothing);
        for (const auto& [stage, tau] : tau_targets) {
            AIM_CHECK(tau > 0.0 && tau <= 1.0, ConfigError,
                      "loss: tau target for stage " << stage << " must be in (0,1], got " << tau);
        }
    }
};

struct AnnealSchedule {
    int64_t start_epoch = 0;
    int64_t duration_epochs = 30;
    double final_tau = 0.25;

    void validate() const {
        AIM_CHECK(start_epoch >= 0, ConfigError,
                  "anneal: start_epoch must be >= 0, got " << start_epoch);
        AIM_CHECK(duration_epochs >= 0, ConfigError,
                  "anneal: duration_epochs must be >= 0, got " << duration_epochs);
        AIM_CHECK(final_tau > 0.0 && final_tau <= 1.0, ConfigError,
                  "anneal: final_tau must be in (0,1], got " << final_tau);
    }
};

// Fraction of the annealing completed at this epoch: 0 before start_epoch,
// linear over the duration, 1 afterwards. Duration 0 steps straight to 1.
inline double anneal_progress(int64_t epoch, const AnnealSchedule& s) {
    if (epoch < s.start_epoch) return 0.0;
    if (s.duration_epochs == 0 || epoch >= s.start_epoch + s.duration_epochs) return 1.0;
    return double(epoch - s.start_epoch) / double(s.duration_epochs);
}

// τ(epoch): 1.0 before the schedule starts, linearly down to final_tau.
inline double anneal_tau(int64_t epoch, const AnnealSchedule& s) {
    return 1.0 + (s.final_tau - 1.0) * anneal_progress(epoch, s);
}

// Per-stage τ(epoch). A stage with its own final target anneals toward that
// target on the shared schedule; otherwise the schedule's final_tau applies.
inline double stage_tau(int64_t stage, int64_t epoch, const AnnealSchedule& s,
                        const LossConfig& cfg) {
    const auto it = cfg.tau_targets.find(stage);
    const double final_tau = it == cfg.tau_targets.end() ? s.final_tau : it->second;
    return 1.0 + (final_tau - 1.0) * anneal_progress(epoch, s);
}

// Mean smoothed cross-entropy: target distribution puts 1−s on the true
// class and s/C on every class. Reference implementation in double.
inline double classification_loss(const Tensor<double>& logits,
                                  const std::vector<int64_t>& labels, double smoothing) {
    check_rank(logits, 2, "classification_loss logits");
    const int64_t B = logits.dim(0), C = logits.dim(1);
    AIM_CHECK(int64_t(labels.size()) == B, DimError,
              "classification_loss: " << labels.size() << " labels for batch " << B);
    AIM_CHECK(smoothing >= 0.0 && smoothing < 1.0, ArgError,
              "classification_loss: smoothing must be in [0,1), got " << smoothing);
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t y = labels[size_t(b)];
        AIM_CHECK(y >= 0 && y < C, ArgError,
                  "classification_loss: label " << y << " out of range [0," << C << ")");
        const double* row = logits.data() + b * C;
        double mx = row[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double lse = 0.0;
        for (int64_t c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
        lse = mx + std::log(lse);
        // loss_b = -Σ_c target_c · log p_c with log p_c = z_c − lse
        double loss = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double target = smoothing / double(C) + (c == y ? 1.0 - smoothing : 0.0);
            loss -= target * (row[c] - lse);
        }
        total += loss;
    }
    return total / double(B);
}

// Mean over the batch of (r_b − τ)².
inline double active_area_loss(const std::vector<double>& ratios, double tau) {
    AIM_CHECK(!ratios.empty(), ArgError, "active_area_loss: empty ratio vector");
    double total = 0.0;
    for (double r : ratios) total += (r - tau) * (r - tau);
    return total / double(ratios.size());
}

// λ·Σ mask losses + Σ auxiliary classification losses + final loss.
inline double total_loss(const std::map<int64_t, double>& stage_cls_losses,
                         double final_cls_loss, const std::map<int64_t, double>& mask_losses,
                         const LossConfig& cfg) {
    cfg.validate();
    double mask_sum = 0.0;
    for (const auto& [stage, l] : mask_losses) mask_sum += l;
    double cls_sum = final_cls_loss;
    if (cfg.use_auxiliary_losses) {
        for (const auto& [stage, l] : stage_cls_losses) cls_sum += l;
    }
    return cfg.lambda_mask * mask_sum + cls_sum;
}

// Scalar breakdown next to the differentiable total, for logging.
template <typename T>
struct LossBreakdown {
    Var<T> total;
    double final_cls = 0.0;
    std::map<int64_t, double> stage_cls;
    std::map<int64_t, double> mask;
    std::map<int64_t, double> taus;

    double total_value() const { return double(total.val()[0]); }
};

// Compose the training loss on the tape from one forward pass's outputs.
template <typename T>
LossBreakdown<T> build_total_loss(Graph<T>& g, const ModelOutputs<T>& out,
                                  const std::vector<int64_t>& labels, const LossConfig& cfg,
                                  int64_t epoch, const AnnealSchedule& schedule) {
    cfg.validate();
    schedule.validate();
    LossBreakdown<T> bd;
    std::vector<std::pair<double, Var<T>>> terms;

    Var<T> final_ce = ops::ce_smoothed(g, out.final_logits, labels, cfg.label_smoothing);
    bd.final_cls = double(final_ce.val()[0]);
    terms.emplace_back(1.0, final_ce);

    if (cfg.use_auxiliary_losses) {
        for (const auto& [stage, logits] : out.stage_logits) {
            Var<T> ce = ops::ce_smoothed(g, logits, labels, cfg.label_smoothing);
            bd.stage_cls.emplace(stage, double(ce.val()[0]));
            terms.emplace_back(1.0, ce);
        }
    }
    for (const auto& [stage, mask] : out.masks) {
        const double tau = stage_tau(stage, epoch, schedule, cfg);
        Var<T> area = ops::active_area(g, mask, tau);
        bd.taus.emplace(stage, tau);
        bd.mask.emplace(stage, double(area.val()[0]));
        terms.emplace_back(cfg.lambda_mask, area);
    }
    bd.total = ops::weighted_sum(g, terms);
    return bd;
}

}  // namespace aim

#endif  // AIM_LOSSES_HPP
