#pragma once

#include <cmath>
#include <cstdint>

namespace monelab {

// Counter-based deterministic generator (splitmix64 finalizer over
// seed + counter). The raw u64 stream depends only on the seed, so the
// same seed yields the same stream on every run. Single-owner: callers
// doing parallel work must split() seeds up front.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * ++counter_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    int64_t uniform_int(int64_t n) {  // in [0, n)
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Derives an independent stream; used to give each purpose (init, data,
    // batching) its own deterministic sequence.
    Rng split(uint64_t stream) const {
        uint64_t z = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
        z = (z ^ (z >> 29)) * 0xFF51AFD7ED558CCDULL;
        z = (z ^ (z >> 32)) * 0xC4CEB9FE1A85EC53ULL;
        return Rng(z ^ (z >> 32));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace monelab
