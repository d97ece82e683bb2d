#pragma once

#include <cstdint>
#include <random>

namespace oodscope {

// Seeded generator whose output is identical on every platform. The standard
// distributions are implementation-defined, so uniform and gaussian draws are
// derived here directly from mt19937_64 words.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound), unbiased by rejection.
    std::uint64_t below(std::uint64_t bound);

    /// Standard normal via Box-Muller; caches the second draw.
    double gaussian();

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Mixes (seed, stream) into an independent sub-seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace oodscope
