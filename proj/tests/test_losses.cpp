// Loss and schedule tests: closed-form values, the frozen hand-computed
// smoothed-CE oracle, total-loss arithmetic, and annealing behavior.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "aim/losses.hpp"
#include "doctest.h"

using namespace aim;

TEST_CASE("uniform logits cost ln C for any smoothing") {
    Tensor<double> logits = Tensor<double>::full({3, 4}, 0.7);  // equal rows
    for (double s : {0.0, 0.05, 0.5}) {
        const double l = classification_loss(logits, {0, 3, 1}, s);
        CHECK(l == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
}

TEST_CASE("smoothed CE matches the hand-computed two-class oracle") {
    // s = 0.05, C = 2, predicted probabilities (0.9, 0.1), true class 0:
    // loss = -(0.975 ln 0.9 + 0.025 ln 0.1) = 0.16029113009123179,
    // computed independently in double before the implementation existed.
    constexpr double kOracle = 0.16029113009123179;
    Tensor<double> logits = Tensor<double>::from({1, 2}, {std::log(0.9), std::log(0.1)});
    CHECK(classification_loss(logits, {0}, 0.05) == doctest::Approx(kOracle).epsilon(1e-9));
}

TEST_CASE("confident correct prediction with zero smoothing costs ~0") {
    Tensor<double> logits = Tensor<double>::from({1, 2}, {25.0, 0.0});
    CHECK(classification_loss(logits, {0}, 0.0) <= 1e-8);
}

TEST_CASE("zero smoothing reduces to plain cross-entropy") {
    Rng rng(1);
    Tensor<double> logits({4, 5});
    for (int64_t i = 0; i < logits.size(); ++i) logits[i] = 2.0 * rng.normal();
    const std::vector<int64_t> labels = {4, 0, 2, 1};
    double plain = 0.0;
    for (int64_t b = 0; b < 4; ++b) {
        double mx = logits.at(b, 0);
        for (int64_t c = 1; c < 5; ++c) mx = std::max(mx, logits.at(b, c));
        double lse = 0.0;
        for (int64_t c = 0; c < 5; ++c) lse += std::exp(logits.at(b, c) - mx);
        plain += mx + std::log(lse) - logits.at(b, labels[size_t(b)]);
    }
    plain /= 4.0;
    CHECK(classification_loss(logits, labels, 0.0) == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("classification loss validates labels and smoothing") {
    Tensor<double> logits({2, 3});
    CHECK_THROWS_AS(classification_loss(logits, {0, 3}, 0.0), ArgError);
    CHECK_THROWS_AS(classification_loss(logits, {0, -1}, 0.0), ArgError);
    CHECK_THROWS_AS(classification_loss(logits, {0, 1}, 1.0), ArgError);
    CHECK_THROWS_AS(classification_loss(logits, {0}, 0.0), DimError);
}

TEST_CASE("active-area loss closed forms") {
    CHECK(active_area_loss({1.0}, 1.0) == 0.0);
    CHECK(active_area_loss({0.5}, 0.25) == doctest::Approx(0.0625).epsilon(1e-15));
    CHECK(active_area_loss({0.1}, 0.25) == doctest::Approx(0.0225).epsilon(1e-15));
    // Batch mean over mixed ratios.
    CHECK(active_area_loss({0.5, 0.1}, 0.25) == doctest::Approx((0.0625 + 0.0225) / 2).epsilon(1e-15));
    // Nonnegative, zero only when every ratio hits the target.
    CHECK(active_area_loss({0.3, 0.3}, 0.3) == 0.0);
    CHECK(active_area_loss({0.3, 0.30001}, 0.3) > 0.0);
    CHECK_THROWS_AS(active_area_loss({}, 0.5), ArgError);
}

TEST_CASE("total loss arithmetic") {
    LossConfig cfg;  // lambda 6
    const std::map<int64_t, double> masks = {{2, 0.01}, {3, 0.04}};
    const std::map<int64_t, double> cls = {{2, 1.0}, {3, 1.2}};
    CHECK(total_loss(cls, 0.8, masks, cfg) == doctest::Approx(3.3).epsilon(1e-12));

    const std::map<int64_t, double> zero_masks = {{2, 0.0}, {3, 0.0}};
    CHECK(total_loss(cls, 0.8, zero_masks, cfg) == doctest::Approx(3.0).epsilon(1e-12));

    LossConfig no_aux = cfg;
    no_aux.use_auxiliary_losses = false;
    CHECK(total_loss(cls, 0.8, masks, no_aux) == doctest::Approx(1.1).epsilon(1e-12));
}

TEST_CASE("total loss is linear in lambda") {
    const std::map<int64_t, double> masks = {{1, 0.02}, {2, 0.03}};
    const std::map<int64_t, double> cls = {{1, 0.5}};
    LossConfig a, b;
    a.lambda_mask = 2.0;
    b.lambda_mask = 4.0;
    const double base = total_loss(cls, 1.0, {}, a);
    const double la = total_loss(cls, 1.0, masks, a) - base;
    const double lb = total_loss(cls, 1.0, masks, b) - base;
    CHECK(lb == doctest::Approx(2.0 * la).epsilon(1e-12));
}

TEST_CASE("removing auxiliary losses never changes the mask term") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        std::map<int64_t, double> masks, cls;
        for (int64_t s = 1; s < 4; ++s) {
            masks[s] = rng.uniform() * 0.2;
            cls[s] = rng.uniform() * 2.0;
        }
        const double fin = rng.uniform();
        LossConfig with, without;
        without.use_auxiliary_losses = false;
        double cls_sum = 0;
        for (auto& [s, v] : cls) cls_sum += v;
        const double diff = total_loss(cls, fin, masks, with) - total_loss(cls, fin, masks, without);
        CHECK(diff == doctest::Approx(cls_sum).epsilon(1e-12));
    }
}

TEST_CASE("annealing: start 10, duration 100, final 0.3") {
    AnnealSchedule s;
    s.start_epoch = 10;
    s.duration_epochs = 100;
    s.final_tau = 0.3;
    CHECK(anneal_tau(5, s) == 1.0);
    CHECK(anneal_tau(10, s) == 1.0);
    CHECK(anneal_tau(60, s) == doctest::Approx(0.65).epsilon(1e-12));
    CHECK(anneal_tau(110, s) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(anneal_tau(500, s) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("annealing with zero duration steps at start_epoch") {
    AnnealSchedule s;
    s.start_epoch = 7;
    s.duration_epochs = 0;
    s.final_tau = 0.25;
    CHECK(anneal_tau(6, s) == 1.0);
    CHECK(anneal_tau(7, s) == 0.25);
    CHECK(anneal_tau(8, s) == 0.25);
}

TEST_CASE("annealing is non-increasing with image in [final_tau, 1]") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        AnnealSchedule s;
        s.start_epoch = rng.uniform_int(20);
        s.duration_epochs = rng.uniform_int(50);
        s.final_tau = 0.05 + 0.95 * rng.uniform();
        double prev = 1.0;
        for (int64_t e = 0; e < 100; ++e) {
            const double tau = anneal_tau(e, s);
            CHECK(tau <= prev + 1e-15);
            CHECK(tau >= s.final_tau - 1e-15);
            CHECK(tau <= 1.0);
            prev = tau;
        }
        CHECK(anneal_tau(s.start_epoch + s.duration_epochs + 1, s) ==
              doctest::Approx(s.final_tau).epsilon(1e-12));
    }
}

TEST_CASE("per-stage tau targets override the schedule's final value") {
    AnnealSchedule s;
    s.start_epoch = 0;
    s.duration_epochs = 10;
    s.final_tau = 0.25;
    LossConfig cfg;
    cfg.tau_targets[2] = 0.5;
    // Midway: shared progress 0.5; stage 2 heads to 0.5, stage 3 to 0.25.
    CHECK(stage_tau(2, 5, s, cfg) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(stage_tau(3, 5, s, cfg) == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(stage_tau(2, 10, s, cfg) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(stage_tau(3, 10, s, cfg) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("config validation") {
    LossConfig cfg;
    cfg.lambda_mask = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = LossConfig{};
    cfg.label_smoothing = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = LossConfig{};
    cfg.tau_targets[1] = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = LossConfig{};
    cfg.tau_targets[1] = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    AnnealSchedule s;
    s.final_tau = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = AnnealSchedule{};
    s.start_epoch = -1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("tape-side total loss equals the pure composition") {
    // Build a tiny model forward, compose the tape loss, and cross-check the
    // scalar against total_loss applied to the logged components.
    ModelConfig mc;
    mc.backbone.input_size = 16;
    mc.backbone.stage_channels = {4, 6, 8, 10};
    mc.backbone.stage_strides = {2, 2, 2, 2};
    mc.backbone.blocks_per_stage = 1;
    mc.estimator.hidden_channels = 4;
    mc.topdown.fused_channels = 6;
    Model<double> model(mc, 40);
    Rng xr(41), gate_rng(42);
    Tensor<double> x({2, 3, 16, 16});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = xr.normal();
    auto out = model.forward(x, Mode::kTrain, &gate_rng);

    LossConfig lc;
    AnnealSchedule sched;
    sched.start_epoch = 0;
    sched.duration_epochs = 30;
    sched.final_tau = 0.25;
    const int64_t epoch = 15;
    auto bd = build_total_loss(*out.graph, out, {0, 2}, lc, epoch, sched);

    // Components must be consistent with the pure functions.
    for (const auto& [s, tau] : bd.taus) {
        CHECK(tau == doctest::Approx(stage_tau(s, epoch, sched, lc)).epsilon(1e-15));
        CHECK(bd.mask.at(s) ==
              doctest::Approx(active_area_loss(out.active_ratios.at(s), tau)).epsilon(1e-12));
    }
    CHECK(bd.final_cls ==
          doctest::Approx(classification_loss(out.final_logits.val(), {0, 2}, lc.label_smoothing))
              .epsilon(1e-12));
    CHECK(bd.total_value() ==
          doctest::Approx(total_loss(bd.stage_cls, bd.final_cls, bd.mask, lc)).epsilon(1e-9));
}
