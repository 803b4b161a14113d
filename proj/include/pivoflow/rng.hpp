#pragma once
// Counter-based random streams. Every consumer derives its own substream from
// (seed, stream id), so draws are independent of scheduling order and two runs
// with the same config produce identical bytes everywhere.

#include <cstdint>

#include "pivoflow/vec2.hpp"

namespace pivoflow {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
}  // namespace detail

class CounterStream {
public:
    CounterStream(std::uint64_t seed, std::uint64_t stream_id)
        : state_(detail::splitmix64(detail::splitmix64(seed) ^
                                    (0xD1B54A32D192ED03ULL * (stream_id + 1)))) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    // Uniform in (0, 1]; never 0 so log() stays finite.
    double next_unit() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // One Box-Muller pair per call; all stochastic terms in the pipeline are
    // 2-vectors, so draw counts stay aligned across integrator choices.
    Vec2 next_gaussian_pair() {
        const double u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        return {r * std::cos(t), r * std::sin(t)};
    }

private:
    std::uint64_t state_;
};

}  // namespace pivoflow
