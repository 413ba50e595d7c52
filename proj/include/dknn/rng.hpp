#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dknn {

/// Counter-based SplitMix64. Output i of stream s under seed k is
/// mix64(key + (i + 1) * 0x9E3779B97F4A7C15) with key = mix64(k ^ mix64(s + 0x632BE59BD9B4E019)),
/// so any value can be regenerated from (seed, stream, counter) alone.
class CounterRng {
public:
    static constexpr const char* kName = "splitmix64-counter/box-muller";

    CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
        : key_(mix64(seed ^ mix64(stream + 0x632BE59BD9B4E019ULL)))
    {
    }

    static constexpr std::uint64_t mix64(std::uint64_t z) noexcept
    {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next() noexcept
    {
        ++counter_;
        return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Standard normal by Box-Muller; values are produced in pairs (cos branch first).
    double normal() noexcept
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dknn
