// Tensor bookkeeping and RNG determinism/distribution tests.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "aim/rng.hpp"
#include "aim/tensor.hpp"

using namespace aim;

TEST_CASE("tensor: construction, fill, clone, reshape") {
    Tensor<float> t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    for (int64_t i = 0; i < 6; ++i) CHECK(t[i] == 0.0f);

    t.at(1, 2) = 5.0f;
    Tensor<float> c = t.clone();
    c.at(1, 2) = 7.0f;
    CHECK(t.at(1, 2) == 5.0f);  // clone is a deep copy

    Tensor<float> shared = t;  // plain copy shares storage
    shared.at(0, 0) = 9.0f;
    CHECK(t.at(0, 0) == 9.0f);

    Tensor<float> r = t.reshaped({3, 2});
    CHECK(r.dim(0) == 3);
    CHECK(r.data() == t.data());
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimError);
    CHECK_THROWS_AS(Tensor<float>({0, 3}), DimError);

    Tensor<double> f = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    CHECK(f.at(1, 1) == 4.0);
    Tensor<float> g = f.cast<float>();
    CHECK(g.at(1, 0) == 3.0f);
}

TEST_CASE("rng: same seed gives the same stream, child streams differ") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c = Rng::child(42, 1);
    Rng d = Rng::child(42, 2);
    CHECK(c.next_u64() != d.next_u64());

    // Same (seed, stream) pair is reproducible regardless of parent state.
    Rng e = Rng::child(42, 1);
    Rng f = Rng::child(42, 1);
    CHECK(e.next_u64() == f.next_u64());
}

TEST_CASE("rng: state string round-trips mid-stream") {
    Rng a(7);
    for (int i = 0; i < 37; ++i) a.uniform();
    const std::string s = a.state();
    Rng b(0);
    b.set_state(s);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK_THROWS_AS(b.set_state(""), IoError);
}

TEST_CASE("rng: uniform ranges and integer bounds") {
    Rng r(3);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double v = r.uniform_open();
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        const int64_t k = r.uniform_int(7);
        CHECK(k >= 0);
        CHECK(k < 7);
    }
    CHECK_THROWS_AS(r.uniform_int(0), ConfigError);
}

TEST_CASE("rng: distribution moments are sane") {
    Rng r(11);
    const int n = 200000;

    double nsum = 0, nsq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        nsum += x;
        nsq += x * x;
    }
    CHECK(std::abs(nsum / n) < 0.01);
    CHECK(std::abs(nsq / n - 1.0) < 0.02);

    // Logistic(0,1): median 0, variance pi^2/3.
    int pos = 0;
    double lsq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = r.logistic();
        pos += x > 0;
        lsq += x * x;
    }
    CHECK(std::abs(double(pos) / n - 0.5) < 0.01);
    CHECK(std::abs(lsq / n - 3.28987) < 0.1);

    // Gumbel(0,1): mean is the Euler-Mascheroni constant.
    double gsum = 0;
    for (int i = 0; i < n; ++i) gsum += r.gumbel();
    CHECK(std::abs(gsum / n - 0.577216) < 0.02);
}

TEST_CASE("rng: permutation is a permutation and is deterministic") {
    Rng a(5), b(5);
    auto p = a.permutation(100);
    auto q = b.permutation(100);
    CHECK(p == q);
    std::set<int64_t> seen(p.begin(), p.end());
    CHECK(seen.size() == 100);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 99);
}
