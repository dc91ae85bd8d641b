// Attribution tests: EPG worked examples and invariances against brute-force
// sums, GradCAM hand oracles and model-level contracts, merged-mask scoring,
// worst-group reports, and the scatter CSV format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aim/attribution.hpp"
#include "doctest.h"

using namespace aim;

namespace {

// Small 4-stage model: 16 px input, strides [2,2,2,2] -> sizes 8,4,2,1.
ModelConfig small_config(Variant v = Variant::kTopdown, int64_t termination = 2) {
    ModelConfig cfg;
    cfg.backbone.input_size = 16;
    cfg.backbone.stage_channels = {6, 8, 10, 12};
    cfg.backbone.stage_strides = {2, 2, 2, 2};
    cfg.backbone.blocks_per_stage = 1;
    cfg.estimator.hidden_channels = 8;
    cfg.topdown.fused_channels = 8;
    cfg.topdown.variant = v;
    cfg.topdown.termination_stage = termination;
    cfg.num_classes = 4;
    return cfg;
}

template <typename T>
Tensor<T> random_images(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
    Rng rng(seed);
    Tensor<T> t({batch, cfg.backbone.in_channels, cfg.backbone.input_size,
                 cfg.backbone.input_size});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.normal());
    return t;
}

// Random binary mask with at least one active and one inactive element.
Tensor<double> random_gt(int64_t h, int64_t w, Rng& rng) {
    Tensor<double> gt({h, w});
    while (true) {
        int64_t on = 0;
        for (int64_t i = 0; i < gt.size(); ++i) {
            gt[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
            on += gt[i] > 0 ? 1 : 0;
        }
        if (on > 0 && on < gt.size()) return gt;
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Energy pointing game
// ---------------------------------------------------------------------------

TEST_CASE("epg worked example: quarter of the energy inside") {
    Tensor<double> attr = Tensor<double>::from({2, 2}, {2, 1, 1, 0});
    Tensor<double> gt = Tensor<double>::from({2, 2}, {1, 0, 0, 0});
    CHECK(epg(attr, gt) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("epg of a uniform map equals the foreground fraction") {
    Tensor<double> attr = Tensor<double>::full({8, 8}, 0.37);
    Tensor<double> gt({8, 8});
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) gt.at(y, x) = 1.0;  // 16 of 64 = 25%
    CHECK(epg(attr, gt) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("attribution contained in the foreground scores exactly 1") {
    Tensor<double> attr({4, 4});
    Tensor<double> gt({4, 4});
    gt.at(1, 1) = 1.0;
    gt.at(1, 2) = 1.0;
    gt.at(3, 0) = 1.0;
    attr.at(1, 1) = 0.2;
    attr.at(3, 0) = 5.0;
    CHECK(epg(attr, gt) == 1.0);
    CHECK(epg(gt, gt) == 1.0);  // a perfect mask is its own best attribution
}

TEST_CASE("epg is invariant under positive rescaling") {
    Rng rng(0xE9);
    Tensor<double> attr({6, 6});
    for (int64_t i = 0; i < attr.size(); ++i) attr[i] = rng.uniform();
    Tensor<double> gt = random_gt(6, 6, rng);
    const double base = epg(attr, gt);
    for (double c : {1e-6, 0.5, 3.0, 1e6}) {
        Tensor<double> scaled = attr.clone();
        for (int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= c;
        CHECK(epg(scaled, gt) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("moving mass from background into the foreground raises epg") {
    Rng rng(0xE10);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> attr({5, 5});
        for (int64_t i = 0; i < attr.size(); ++i) attr[i] = 0.05 + rng.uniform();
        Tensor<double> gt = random_gt(5, 5, rng);
        int64_t inside = -1, outside = -1;
        while (inside < 0 || gt[inside] != 1.0) inside = rng.uniform_int(attr.size());
        while (outside < 0 || gt[outside] != 0.0) outside = rng.uniform_int(attr.size());
        const double before = epg(attr, gt);
        Tensor<double> moved = attr.clone();
        const double delta = 0.5 * moved[outside];
        moved[outside] -= delta;
        moved[inside] += delta;
        CHECK(epg(moved, gt) > before);
    }
}

TEST_CASE("epg matches a brute-force energy ratio on random maps") {
    Rng rng(0xEB2);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<double> attr({16, 16});
        for (int64_t i = 0; i < attr.size(); ++i) attr[i] = rng.uniform() * 4.0;
        Tensor<double> gt = random_gt(16, 16, rng);
        double inside = 0, total = 0;
        for (int64_t y = 0; y < 16; ++y) {
            for (int64_t x = 0; x < 16; ++x) {
                total += attr.at(y, x);
                if (gt.at(y, x) == 1.0) inside += attr.at(y, x);
            }
        }
        CHECK(epg(attr, gt) == doctest::Approx(inside / total).epsilon(1e-12));
    }
}

TEST_CASE("epg rejects malformed inputs") {
    Tensor<double> attr = Tensor<double>::full({2, 2}, 1.0);
    Tensor<double> gt = Tensor<double>::from({2, 2}, {1, 0, 0, 0});
    CHECK_THROWS_AS(epg(Tensor<double>({2, 2}), gt), DegenerateScoreError);  // all-zero map
    CHECK_THROWS_AS(epg(attr, Tensor<double>({2, 2})), ArgError);            // empty foreground
    CHECK_THROWS_AS(epg(attr, Tensor<double>::full({2, 2}, 0.5)), ArgError);  // non-binary gt
    CHECK_THROWS_AS(epg(attr, Tensor<double>::full({2, 3}, 1.0)), DimError);
    Tensor<double> neg = attr.clone();
    neg[0] = -0.1;
    CHECK_THROWS_AS(epg(neg, gt), NumericError);
    Tensor<double> nan = attr.clone();
    nan[0] = std::nan("");
    CHECK_THROWS_AS(epg(nan, gt), NumericError);
}

// ---------------------------------------------------------------------------
// Bilinear upsampling
// ---------------------------------------------------------------------------

TEST_CASE("bilinear upsample: identity, constant extrapolation, 2x oracle") {
    Tensor<double> src = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    Tensor<double> same = bilinear_upsample(src, 2, 2);
    for (int64_t i = 0; i < 4; ++i) CHECK(same[i] == src[i]);

    Tensor<double> one = Tensor<double>::from({1, 1}, {0.7});
    Tensor<double> big = bilinear_upsample(one, 5, 3);
    for (int64_t i = 0; i < big.size(); ++i) CHECK(big[i] == 0.7);

    // Half-pixel-center weights for 2 -> 4 per axis: [1,0], [.75,.25],
    // [.25,.75], [0,1]; outer product of the two axes.
    const double kWant[16] = {1.0, 1.25, 1.75, 2.0,  1.5, 1.75, 2.25, 2.5,
                              2.5, 2.75, 3.25, 3.5,  3.0, 3.25, 3.75, 4.0};
    Tensor<double> up = bilinear_upsample(src, 4, 4);
    for (int64_t i = 0; i < 16; ++i) CHECK(up[i] == doctest::Approx(kWant[i]).epsilon(1e-15));
}

// ---------------------------------------------------------------------------
// GradCAM
// ---------------------------------------------------------------------------

TEST_CASE("gradcam capture oracle: weighted channel sum, rectified, normalized") {
    // alpha_0 = mean(grad_0) = 1, alpha_1 = mean(grad_1) = -2, so the raw map
    // is relu(act_0 - 2 act_1) = [[0,2],[3,0]], normalized by 3.
    Tensor<float> act({1, 2, 2, 2});
    Tensor<float> grad({1, 2, 2, 2});
    const float a0[4] = {1, 2, 3, 4}, a1[4] = {2, 0, 0, 2};
    for (int64_t i = 0; i < 4; ++i) {
        act[i] = a0[i];
        act[4 + i] = a1[i];
        grad[i] = 1.0f;
        grad[4 + i] = -2.0f;
    }
    Attribution m = gradcam_from_capture(act, grad, 0, 2, 2);
    CHECK_FALSE(m.degenerate);
    CHECK(m.map.at(0, 0) == doctest::Approx(0.0));
    CHECK(m.map.at(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(m.map.at(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.map.at(1, 1) == doctest::Approx(0.0));
}

TEST_CASE("gradcam flags the all-zero map as degenerate instead of normalizing") {
    Tensor<float> act = Tensor<float>::full({1, 3, 4, 4}, 1.0f);
    SUBCASE("zero gradients") {
        Tensor<float> grad({1, 3, 4, 4});
        Attribution m = gradcam_from_capture(act, grad, 0, 8, 8);
        CHECK(m.degenerate);
        for (int64_t i = 0; i < m.map.size(); ++i) CHECK(m.map[i] == 0.0);
    }
    SUBCASE("everything rectified away") {
        Tensor<float> grad = Tensor<float>::full({1, 3, 4, 4}, -1.0f);
        Attribution m = gradcam_from_capture(act, grad, 0, 8, 8);
        CHECK(m.degenerate);
    }
}

TEST_CASE("gradcam capture validates shapes and sample index") {
    Tensor<float> act({2, 3, 4, 4});
    Tensor<float> grad({2, 3, 4, 4});
    CHECK_THROWS_AS(gradcam_from_capture(act, Tensor<float>({2, 3, 4, 5}), 0, 8, 8), DimError);
    CHECK_THROWS_AS(gradcam_from_capture(act, grad, 2, 8, 8), ArgError);
    CHECK_THROWS_AS(gradcam_from_capture(act, grad, -1, 8, 8), ArgError);
}

TEST_CASE("default gradcam tap follows the architecture") {
    GradcamTap base = default_gradcam_tap(small_config(Variant::kBaseline));
    CHECK(base.kind == GradcamTap::Kind::kFused);
    GradcamTap td = default_gradcam_tap(small_config(Variant::kTopdown, 1));
    CHECK(td.kind == GradcamTap::Kind::kStage);
    CHECK(td.index == 1);
    GradcamTap se = default_gradcam_tap(small_config(Variant::kSingleEstimator, 2));
    CHECK(se.kind == GradcamTap::Kind::kStage);
    CHECK(se.index == 2);
    CHECK(default_gradcam_tap(small_config(Variant::kBottomUp)).kind ==
          GradcamTap::Kind::kFused);
}

TEST_CASE("model gradcam returns input-sized normalized maps") {
    for (Variant v : {Variant::kBaseline, Variant::kTopdown}) {
        ModelConfig cfg = small_config(v);
        Model<float> model(cfg, 5);
        Tensor<float> images = random_images<float>(cfg, 3, 11);
        auto maps = gradcam(model, images, {0, 1, 3}, default_gradcam_tap(cfg));
        REQUIRE(maps.size() == 3);
        for (const auto& m : maps) {
            CHECK(m.map.dim(0) == 16);
            CHECK(m.map.dim(1) == 16);
            double mx = 0;
            for (int64_t i = 0; i < m.map.size(); ++i) {
                CHECK(m.map[i] >= 0.0);
                CHECK(m.map[i] <= 1.0);
                mx = std::max(mx, m.map[i]);
            }
            if (!m.degenerate) CHECK(mx == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("model gradcam is deterministic in eval") {
    ModelConfig cfg = small_config(Variant::kTopdown);
    Model<float> model(cfg, 5);
    Tensor<float> images = random_images<float>(cfg, 2, 12);
    auto a = gradcam(model, images, {1, 2}, default_gradcam_tap(cfg));
    auto b = gradcam(model, images, {1, 2}, default_gradcam_tap(cfg));
    for (size_t i = 0; i < a.size(); ++i) {
        for (int64_t j = 0; j < a[i].map.size(); ++j) CHECK(a[i].map[j] == b[i].map[j]);
    }
}

TEST_CASE("model gradcam validates targets and taps") {
    ModelConfig cfg = small_config(Variant::kBaseline);
    Model<float> model(cfg, 5);
    Tensor<float> images = random_images<float>(cfg, 2, 13);
    GradcamTap tap = default_gradcam_tap(cfg);
    CHECK_THROWS_AS(gradcam(model, images, {0, 4}, tap), ArgError);   // class out of range
    CHECK_THROWS_AS(gradcam(model, images, {0, -1}, tap), ArgError);
    CHECK_THROWS_AS(gradcam(model, images, {0}, tap), DimError);      // wrong target count
    GradcamTap bad_stage{GradcamTap::Kind::kStage, 2};
    CHECK_THROWS_AS(gradcam(model, images, {0, 1}, bad_stage), ArgError);  // baseline has none
    GradcamTap bad_backbone{GradcamTap::Kind::kBackbone, 9};
    CHECK_THROWS_AS(gradcam(model, images, {0, 1}, bad_backbone), ArgError);
}

TEST_CASE("backbone taps work on any stage") {
    ModelConfig cfg = small_config(Variant::kBaseline);
    Model<float> model(cfg, 5);
    Tensor<float> images = random_images<float>(cfg, 1, 14);
    for (int64_t s = 0; s < 4; ++s) {
        auto maps = gradcam(model, images, {2}, GradcamTap{GradcamTap::Kind::kBackbone, s});
        CHECK(maps[0].map.dim(0) == 16);
    }
}

TEST_CASE("a classifier row of zeros yields a degenerate map for that class") {
    ModelConfig cfg = small_config(Variant::kBaseline);
    Model<float> model(cfg, 5);
    for (Param<float>* p : model.parameters()) {
        if (p->name == "final_head.w") {
            for (int64_t i = 0; i < p->value.dim(1); ++i) p->value[i] = 0.0f;  // class 0 row
        }
    }
    Tensor<float> images = random_images<float>(cfg, 2, 15);
    auto maps = gradcam(model, images, {0, 0}, default_gradcam_tap(cfg));
    CHECK(maps[0].degenerate);
    CHECK(maps[1].degenerate);
}

// ---------------------------------------------------------------------------
// Merged-mask scoring
// ---------------------------------------------------------------------------

TEST_CASE("mask_epg of an all-ones merged mask is the foreground fraction") {
    ModelConfig cfg = small_config(Variant::kTopdown);
    Model<float> model(cfg, 7);
    Tensor<float> images = random_images<float>(cfg, 2, 21);
    ForwardOptions opts;
    opts.probe = MaskProbe::kForceOnes;
    auto out = model.forward(images, Mode::kEval, nullptr, opts);
    Rng rng(0x6A);
    Tensor<double> gt = random_gt(16, 16, rng);
    double on = 0;
    for (int64_t i = 0; i < gt.size(); ++i) on += gt[i];
    for (int64_t b = 0; b < 2; ++b) {
        CHECK(mask_epg(out, gt, b, 16) == doctest::Approx(on / 256.0).epsilon(1e-12));
    }
}

TEST_CASE("mask_epg scores the nearest-upsampled mask union") {
    ModelConfig cfg = small_config(Variant::kTopdown);
    Model<float> model(cfg, 7);
    Tensor<float> images = random_images<float>(cfg, 1, 22);
    auto out = model.forward(images, Mode::kEval, nullptr);
    Tensor<float> merged = merged_mask(out, 16, 16);
    Rng rng(0x6B);
    Tensor<double> gt = random_gt(16, 16, rng);
    double inside = 0, total = 0;
    for (int64_t i = 0; i < 256; ++i) {
        total += double(merged[i]);
        inside += double(merged[i]) * gt[i];
    }
    if (total == 0) {
        CHECK_THROWS_AS(mask_epg(out, gt, 0, 16), DegenerateScoreError);
    } else {
        CHECK(mask_epg(out, gt, 0, 16) == doctest::Approx(inside / total).epsilon(1e-12));
    }
}

// ---------------------------------------------------------------------------
// Worst-group accuracy
// ---------------------------------------------------------------------------

TEST_CASE("group report worked example") {
    // Group 7: 2/2 correct. Group 3: 1/2 correct.
    const std::vector<int64_t> pred = {0, 1, 2, 2};
    const std::vector<int64_t> label = {0, 1, 2, 3};
    const std::vector<int64_t> group = {7, 7, 3, 3};
    GroupReport rep = worst_group_accuracy(pred, label, group);
    CHECK(rep.per_group.at(7) == 1.0);
    CHECK(rep.per_group.at(3) == 0.5);
    CHECK(rep.worst == 0.5);
    CHECK(rep.best == 1.0);
    CHECK(rep.overall == 0.75);
    CHECK(rep.group_sizes.at(7) == 2);
    CHECK(rep.empty_groups.empty());
}

TEST_CASE("worst <= overall <= best on random reports") {
    Rng rng(0x96);
    for (int trial = 0; trial < 50; ++trial) {
        const int64_t n = 5 + rng.uniform_int(40);
        std::vector<int64_t> pred, label, group;
        for (int64_t i = 0; i < n; ++i) {
            label.push_back(rng.uniform_int(4));
            pred.push_back(rng.uniform_int(4));
            group.push_back(rng.uniform_int(5));
        }
        GroupReport rep = worst_group_accuracy(pred, label, group);
        CHECK(rep.worst <= rep.overall + 1e-15);
        CHECK(rep.overall <= rep.best + 1e-15);
        for (const auto& [gid, acc] : rep.per_group) {
            CHECK(acc >= rep.worst);
            CHECK(acc <= rep.best);
        }
    }
}

TEST_CASE("expected-but-absent groups are reported, not scored") {
    const std::vector<int64_t> pred = {0, 1};
    const std::vector<int64_t> label = {0, 0};
    const std::vector<int64_t> group = {0, 1};
    GroupReport rep = worst_group_accuracy(pred, label, group, {0, 1, 2, 5});
    CHECK(rep.empty_groups == std::vector<int64_t>{2, 5});
    CHECK(rep.per_group.size() == 2);
    CHECK(rep.worst == 0.0);  // group 1 missed its single sample
}

TEST_CASE("group report rejects mismatched or empty inputs") {
    CHECK_THROWS_AS(worst_group_accuracy({0}, {0, 1}, {0, 0}), DimError);
    CHECK_THROWS_AS(worst_group_accuracy({}, {}, {}), ArgError);
}

// ---------------------------------------------------------------------------
// Scatter CSV
// ---------------------------------------------------------------------------

TEST_CASE("epg scatter file writes the exact header and roundtrips values") {
    const std::string path = "epg_scatter_test.csv";
    std::vector<EpgScatterRecord> recs;
    recs.push_back({0, 0.25, 0.875, 3, true});
    recs.push_back({17, 1.0 / 3.0, 0.9999999999999999, 0, false});
    write_epg_scatter(path, recs);

    std::ifstream f(path);
    std::string line;
    REQUIRE(std::getline(f, line));
    CHECK(line == "sample,epg_baseline,epg_aim,group,correct");
    REQUIRE(std::getline(f, line));
    CHECK(line == "0,0.25,0.875,3,1");
    REQUIRE(std::getline(f, line));
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    CHECK(field == "17");
    std::getline(ss, field, ',');
    CHECK(std::stod(field) == doctest::Approx(1.0 / 3.0).epsilon(1e-16));
    std::getline(ss, field, ',');
    CHECK(std::stod(field) == doctest::Approx(0.9999999999999999).epsilon(1e-16));
    const bool trailing = bool(std::getline(f, line)) && !line.empty();
    CHECK_FALSE(trailing);
    std::remove(path.c_str());
}

TEST_CASE("scatter writer reports unwritable paths") {
    CHECK_THROWS_AS(write_epg_scatter("/nonexistent-dir/x.csv", {}), IoError);
}
