// Finite-difference gradient checks for every differentiable op, plus a few
// exact-value cross-checks. Everything runs in double so central differences
// resolve to ~1e-10 and the tolerances can stay tight.
//
// The binary gate is deliberately absent: its forward is a step function and
// its straight-through backward is a surrogate, so finite differences cannot
// (and should not) match. The gate's backward is pinned against an explicit
// soft-relaxation graph in the masking tests instead.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "aim/losses.hpp"
#include "aim/ops.hpp"
#include "doctest.h"

using namespace aim;

namespace {

Tensor<double> random_tensor(const std::vector<int64_t>& shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

// Random tensor kept away from zero (for kinked ops like relu).
Tensor<double> random_tensor_off_zero(const std::vector<int64_t>& shape, Rng& rng,
                                      double margin = 0.05) {
    Tensor<double> t = random_tensor(shape, rng);
    for (int64_t i = 0; i < t.size(); ++i) {
        if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? t[i] - margin : t[i] + margin;
    }
    return t;
}

// Scalar probe ⟨v, w⟩ with fixed weights w, so every output element
// influences the root with a distinct coefficient (catches transposed or
// misrouted gradients that a plain sum would miss).
Var<double> dot_const(Graph<double>& g, Var<double> v, Tensor<double> w) {
    const Tensor<double>& x = v.val();
    REQUIRE(x.size() == w.size());
    double s = 0;
    for (int64_t i = 0; i < x.size(); ++i) s += x[i] * w[i];
    Tensor<double> val({1});
    val[0] = s;
    const int out = g.tape.push(std::move(val), g.tape.needs_grad(v.id));
    const int vid = v.id;
    g.tape.set_backward(out, [out, vid, w](Tape<double>& t) {
        const double go = t.grad(out)[0];
        Tensor<double>& dv = t.grad(vid);
        for (int64_t i = 0; i < dv.size(); ++i) dv[i] += go * w[i];
    });
    return {&g.tape, out};
}

using BuildFn =
    std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

// Central-difference gradient check of a scalar-valued builder over a set of
// input tensors. The graph is rebuilt from scratch for every probe with an
// identically-seeded RNG, so stochastic ops (dropout) see the same draws.
void check_grads(std::vector<Tensor<double>> inputs, const BuildFn& build,
                 Mode mode = Mode::kEval, double h = 1e-5, double atol = 1e-7,
                 double rtol = 1e-4) {
    auto eval = [&](std::vector<Tensor<double>>* grads) -> double {
        Graph<double> g;
        g.mode = mode;
        Rng rng(0xFDFD);
        g.rng = &rng;
        std::vector<Var<double>> vars;
        vars.reserve(inputs.size());
        for (const auto& x : inputs) vars.push_back(g.input(x.clone(), /*needs_grad=*/true));
        Var<double> root = build(g, vars);
        REQUIRE(root.val().size() == 1);
        const double value = root.val()[0];
        if (grads) {
            g.tape.backward(root.id);
            grads->clear();
            for (auto& v : vars) {
                grads->push_back(g.tape.has_grad(v.id) ? v.grad().clone()
                                                       : Tensor<double>::zeros(v.val().shape()));
            }
        }
        return value;
    };

    std::vector<Tensor<double>> analytic;
    eval(&analytic);
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t j = 0; j < inputs[i].size(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + h;
            const double fp = eval(nullptr);
            inputs[i][j] = orig - h;
            const double fm = eval(nullptr);
            inputs[i][j] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[i][j];
            const double tol = atol + rtol * std::max(std::abs(num), std::abs(ana));
            INFO("input ", i, " element ", j, ": analytic ", ana, " numeric ", num);
            CHECK(std::abs(ana - num) <= tol);
        }
    }
}

// Builder that reduces an op's output through dot_const with seeded weights.
BuildFn reduced(std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)> op) {
    return [op = std::move(op)](Graph<double>& g, const std::vector<Var<double>>& v) {
        Var<double> y = op(g, v);
        Rng wr(0xD07);
        return dot_const(g, y, random_tensor(y.val().shape(), wr));
    };
}

}  // namespace

TEST_CASE("conv2d gradients (3x3 stride 1 pad 1)") {
    Rng rng(1);
    check_grads({random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3 * 3 * 3}, rng, 0.5),
                 random_tensor({4}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::conv2d(g, v[0], v[1], v[2], 3, 3, 1, 1);
                }));
}

TEST_CASE("conv2d gradients (patchify: 4x4 stride 4 pad 0)") {
    Rng rng(2);
    check_grads({random_tensor({2, 2, 8, 8}, rng), random_tensor({3, 2 * 4 * 4}, rng, 0.5),
                 random_tensor({3}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::conv2d(g, v[0], v[1], v[2], 4, 4, 4, 0);
                }));
}

TEST_CASE("conv2d gradients (1x1)") {
    Rng rng(3);
    check_grads({random_tensor({2, 4, 3, 3}, rng), random_tensor({2, 4}, rng, 0.5),
                 random_tensor({2}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::conv2d(g, v[0], v[1], v[2], 1, 1, 1, 0);
                }));
}

TEST_CASE("linear gradients") {
    Rng rng(4);
    check_grads({random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::linear(g, v[0], v[1], v[2]);
                }));
}

TEST_CASE("relu gradients (off-kink inputs)") {
    Rng rng(5);
    check_grads({random_tensor_off_zero({2, 3, 4, 4}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::relu(g, v[0]);
                }));
}

TEST_CASE("gelu gradients") {
    Rng rng(6);
    check_grads({random_tensor({2, 3, 4, 4}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::gelu(g, v[0]);
                }));
}

TEST_CASE("sigmoid gradients") {
    Rng rng(7);
    check_grads({random_tensor({3, 7}, rng, 2.0)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::sigmoid(g, v[0]);
                }));
}

TEST_CASE("soft_bound gradients and range") {
    Rng rng(71);
    check_grads({random_tensor({3, 7}, rng, 4.0)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::soft_bound(g, v[0], 8.0);
                }));
    // Output stays inside (-s, s) and the derivative never underflows, even
    // for inputs far past the bound.
    Graph<double> g;
    Tensor<double> ext = Tensor<double>::from({1, 4}, {-1e6, -10.0, 10.0, 1e6});
    Var<double> x = g.input(ext.clone(), true);
    Var<double> y = ops::soft_bound(g, x, 8.0);
    Var<double> s = dot_const(g, y, Tensor<double>::full({1, 4}, 1.0));
    g.tape.backward(s.id);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(std::abs(y.val()[i]) < 8.0);
        CHECK(x.grad()[i] > 0.0);
    }
    CHECK(y.val()[2] == doctest::Approx(10.0 / (1.0 + 10.0 / 8.0)));
}

TEST_CASE("add gradients") {
    Rng rng(8);
    check_grads({random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3, 2, 2}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::add(g, v[0], v[1]);
                }));
}

TEST_CASE("mul_mask gradients (both operands)") {
    Rng rng(9);
    check_grads({random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 1, 4, 4}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::mul_mask(g, v[0], v[1]);
                }));
}

TEST_CASE("upsample_nearest2 gradients") {
    Rng rng(10);
    check_grads({random_tensor({2, 3, 3, 3}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::upsample_nearest2(g, v[0]);
                }));
}

TEST_CASE("gap gradients") {
    Rng rng(11);
    check_grads({random_tensor({3, 4, 3, 5}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::gap(g, v[0]);
                }));
}

TEST_CASE("concat_gap gradients") {
    Rng rng(12);
    check_grads({random_tensor({2, 3, 3, 3}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::concat_gap(g, v[0]);
                }));
}

TEST_CASE("dropout gradients (train mode, fixed draws)") {
    Rng rng(13);
    check_grads({random_tensor({4, 6}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::dropout(g, v[0], 0.3);
                }),
                Mode::kTrain);
}

TEST_CASE("dropout is identity in eval mode") {
    Rng rng(14);
    Graph<double> g;
    g.mode = Mode::kEval;
    Tensor<double> x = random_tensor({3, 5}, rng);
    Var<double> y = ops::dropout(g, g.input(x.clone(), false), 0.9);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(y.val()[i] == x[i]);
}

TEST_CASE("norm_spatial gradients (input, gamma, beta)") {
    Rng rng(15);
    check_grads({random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng),
                 random_tensor({3}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::norm_spatial(g, v[0], v[1], v[2], 1e-5);
                }));
}

TEST_CASE("norm_channel gradients (input, gamma, beta)") {
    Rng rng(16);
    check_grads({random_tensor({2, 5, 3, 3}, rng), random_tensor({5}, rng),
                 random_tensor({5}, rng)},
                reduced([](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::norm_channel(g, v[0], v[1], v[2], 1e-5);
                }));
}

TEST_CASE("ce_smoothed gradients") {
    Rng rng(17);
    const std::vector<int64_t> labels = {0, 2, 1};
    check_grads({random_tensor({3, 4}, rng, 2.0)},
                [&](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::ce_smoothed(g, v[0], labels, 0.05);
                });
}

TEST_CASE("active_area gradients") {
    Rng rng(18);
    check_grads({random_tensor({2, 1, 4, 4}, rng)},
                [](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::active_area(g, v[0], 0.25);
                });
}

TEST_CASE("class_score_sum gradients") {
    Rng rng(19);
    const std::vector<int64_t> labels = {1, 0};
    check_grads({random_tensor({2, 3}, rng)},
                [&](Graph<double>& g, const std::vector<Var<double>>& v) {
                    return ops::class_score_sum(g, v[0], labels);
                });
}

TEST_CASE("weighted_sum gradients and value") {
    Rng rng(20);
    check_grads({random_tensor({2, 1, 2, 2}, rng), random_tensor({3, 4}, rng, 2.0)},
                [](Graph<double>& g, const std::vector<Var<double>>& v) {
                    Var<double> a = ops::active_area(g, v[0], 0.5);
                    Var<double> c = ops::ce_smoothed(g, v[1], {0, 1, 2}, 0.0);
                    return ops::weighted_sum(g, {{6.0, a}, {1.0, c}});
                });
}

TEST_CASE("composite chain gradients (conv -> norm -> relu -> gap -> linear -> ce)") {
    Rng rng(21);
    const std::vector<int64_t> labels = {2, 0};
    check_grads(
        {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2 * 3 * 3}, rng, 0.5),
         random_tensor({3}, rng), random_tensor({3}, rng, 0.2), random_tensor({3}, rng, 0.2),
         random_tensor({4, 3}, rng, 0.5), random_tensor({4}, rng)},
        [&](Graph<double>& g, const std::vector<Var<double>>& v) {
            Var<double> x = ops::conv2d(g, v[0], v[1], v[2], 3, 3, 1, 1);
            Var<double> gamma = ops::add(g, v[3], g.constant(Tensor<double>::full({3}, 1.0)));
            x = ops::norm_spatial(g, x, gamma, v[4], 1e-5);
            x = ops::gelu(g, x);
            x = ops::gap(g, x);
            x = ops::linear(g, x, v[5], v[6]);
            return ops::ce_smoothed(g, x, labels, 0.05);
        });
}

TEST_CASE("tape reuse: two backward passes agree") {
    Rng rng(22);
    Graph<double> g;
    Tensor<double> x = random_tensor({2, 3}, rng);
    Var<double> vx = g.input(x.clone(), true);
    Var<double> loss = ops::ce_smoothed(g, vx, {0, 1}, 0.0);
    g.tape.backward(loss.id);
    Tensor<double> first = vx.grad().clone();
    g.tape.backward(loss.id);
    for (int64_t i = 0; i < first.size(); ++i) CHECK(vx.grad()[i] == first[i]);
}

TEST_CASE("ce_smoothed matches the pure reference loss") {
    Rng rng(23);
    Tensor<double> logits = random_tensor({5, 4}, rng, 3.0);
    const std::vector<int64_t> labels = {3, 0, 1, 2, 2};
    for (double s : {0.0, 0.05, 0.3}) {
        Graph<double> g;
        Var<double> l = ops::ce_smoothed(g, g.input(logits.clone(), false), labels, s);
        CHECK(l.val()[0] == doctest::Approx(classification_loss(logits, labels, s)).epsilon(1e-12));
    }
}

TEST_CASE("batch equivariance: duplicating the batch duplicates outputs") {
    Rng rng(24);
    Tensor<double> x = random_tensor({2, 3, 6, 6}, rng);
    Tensor<double> x2({4, 3, 6, 6});
    for (int64_t b = 0; b < 4; ++b) {
        const double* src = x.data() + (b % 2) * 3 * 36;
        std::copy(src, src + 3 * 36, x2.data() + b * 3 * 36);
    }
    Rng wr(25);
    Tensor<double> w = random_tensor({4, 3 * 3 * 3}, wr, 0.5);
    Tensor<double> b = random_tensor({4}, wr);
    Tensor<double> gamma = Tensor<double>::full({4}, 1.0), beta({4});

    auto run = [&](const Tensor<double>& in) {
        Graph<double> g;
        Var<double> y = ops::conv2d(g, g.input(in.clone(), false), g.input(w.clone(), false),
                                    g.input(b.clone(), false), 3, 3, 1, 1);
        y = ops::norm_spatial(g, y, g.input(gamma.clone(), false), g.input(beta.clone(), false),
                              1e-5);
        y = ops::gap(g, ops::relu(g, y));
        return y.val().clone();
    };
    Tensor<double> y1 = run(x), y2 = run(x2);
    for (int64_t bb = 0; bb < 4; ++bb) {
        for (int64_t c = 0; c < 4; ++c) {
            CHECK(y2.at(bb, c) == y1.at(bb % 2, c));
        }
    }
}
