// rng.hpp — deterministic random number generation.
//
// A thin wrapper over std::mt19937_64 with hand-rolled output transforms.
// The transforms (uniform, normal, logistic) are written out explicitly
// instead of using std::*_distribution because the standard does not pin
// distribution algorithms across library implementations, and run-for-run
// reproducibility (same seed => bit-identical training trajectory) is a hard
// requirement here. Engine state serializes to a plain decimal string via the
// standard stream operators, which *are* pinned by the standard.

#ifndef AIM_RNG_HPP
#define AIM_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aim/common.hpp"

namespace aim {

// splitmix64 — used to derive well-separated child seeds from (seed, stream).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    // Independent child stream; stable w.r.t. the parent's current state.
    // Used to give initialization / shuffling / gate noise / augmentation
    // their own streams so adding draws to one cannot shift the others.
    static Rng child(uint64_t seed, uint64_t stream) {
        return Rng(splitmix64(seed ^ splitmix64(stream * 0x9e3779b97f4a7c15ull + 1)));
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1): 53 random bits scaled, exact and portable.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on the open interval (0, 1); safe as a log() argument.
    double uniform_open() { return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). Multiply-high mapping: deterministic, negligible bias.
    int64_t uniform_int(int64_t n) {
        AIM_CHECK(n > 0, ConfigError, "uniform_int: n must be positive, got " << n);
        return int64_t((__uint128_t(next_u64()) * __uint128_t(n)) >> 64);
    }

    // Standard normal via Box-Muller (cosine branch only: two uniforms per
    // draw, no cached state, so serialization stays a pure engine dump).
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Logistic(0,1) — distribution of the difference of two independent
    // standard Gumbel draws; this is the noise the binary gate consumes.
    double logistic() {
        const double u = uniform_open();
        return std::log(u) - std::log1p(-u);
    }

    // Standard Gumbel(0,1), kept for completeness/tests.
    double gumbel() { return -std::log(-std::log(uniform_open())); }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            std::swap(v[size_t(i)], v[size_t(uniform_int(i + 1))]);
        }
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[size_t(i)] = i;
        shuffle(p);
        return p;
    }

    // Engine state as a decimal string (portable per the C++ standard).
    std::string state() const {
        std::ostringstream oss;
        oss << engine_;
        return oss.str();
    }

    void set_state(const std::string& s) {
        std::istringstream iss(s);
        iss >> engine_;
        AIM_CHECK(!iss.fail(), IoError, "Rng::set_state: malformed engine state string");
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace aim

#endif  // AIM_RNG_HPP
