#pragma once

#include <cstdint>

namespace fastfit {

// Counter-based generator: the i-th draw is mix(key, i), so the stream is a
// pure function of (seed, counter) and identical on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

    std::uint64_t seed_key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller; consumes two draws.
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream derived from this generator's key and a stream id.
    // Does not advance this generator.
    Rng fork(std::uint64_t stream) const {
        Rng r;
        r.key_ = mix64(key_ ^ mix64(stream + 0xbb67ae8584caa73bULL));
        return r;
    }

    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace fastfit
