#pragma once

#include <cmath>
#include <cstdint>

namespace wsf {

namespace detail {

// SplitMix64 finalizer. All integer arithmetic, identical on every platform.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

} // namespace detail

/// Counter-based random generator. A draw is a pure function of
/// (seed, stream, counter), so independent streams can be handed to
/// parallel tasks and replay identically regardless of scheduling.
class Rng {
public:
    Rng() = default;
    Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    /// Derive an independent stream, e.g. one per instance or per step.
    Rng stream(uint64_t purpose, uint64_t id = 0) const {
        uint64_t s = detail::splitmix64(stream_ ^ detail::splitmix64(purpose + 0x51ed2701u));
        return Rng(seed_, detail::splitmix64(s ^ detail::splitmix64(id + 0xa5a5a5a5u)));
    }

    uint64_t next_u64() {
        uint64_t v = detail::splitmix64(counter_++ ^ detail::splitmix64(stream_ ^ detail::splitmix64(seed_)));
        return v;
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    float uniform() { return float(next_double()); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) {
        // Modulo bias is < 2^-40 for the n used here (n << 2^24).
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller; the spare draw is cached.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = float(r * std::sin(a));
        have_spare_ = true;
        return float(r * std::cos(a));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }

private:
    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
    uint64_t counter_ = 0;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

/// Fixed purpose tags so stream derivations are stable across the codebase.
namespace rng_purpose {
inline constexpr uint64_t data_gen = 1;
inline constexpr uint64_t init_vector = 2;
inline constexpr uint64_t fit_sampling = 3;
inline constexpr uint64_t mask = 4;
inline constexpr uint64_t base_training = 5;
inline constexpr uint64_t diffusion_train = 6;
inline constexpr uint64_t diffusion_sample = 7;
inline constexpr uint64_t analysis = 8;
inline constexpr uint64_t feature_extractor = 9;
inline constexpr uint64_t surface_sampling = 10;
inline constexpr uint64_t model_init = 11;
} // namespace rng_purpose

} // namespace wsf
