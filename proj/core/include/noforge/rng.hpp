#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace noforge {

// splitmix64: used to derive independent stream seeds from (seed, index) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. std::mt19937_64 output is fully specified by the
// standard; the distributions below are hand-rolled because the standard
// library distribution objects are implementation-defined, which would break
// the byte-identical reproducibility contract across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : gen_(splitmix64(seed ^ splitmix64(stream))) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        // Rejection-free modulo bias is negligible for n << 2^64 but we use
        // rejection sampling anyway so the stream is well defined.
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return static_cast<std::int64_t>(v % un);
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Fisher-Yates shuffle with the deterministic Rng above.
template <typename Container>
void shuffle(Container& c, Rng& rng) {
    const std::int64_t n = static_cast<std::int64_t>(c.size());
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = rng.uniform_int(i + 1);
        std::swap(c[i], c[j]);
    }
}

} // namespace noforge
