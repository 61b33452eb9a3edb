// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace nextshot {

class Tensor;

/// Counter-based SplitMix64 generator. Streams are fully determined by the
/// seed; `split` derives independent substreams from a label without
/// advancing the parent.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed), counter_(0) {}

    std::uint64_t seed() const noexcept { return seed_; }

    Rng split(std::string_view label) const noexcept;
    Rng split(std::uint64_t label) const noexcept;

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1).
    double uniform() noexcept;
    /// Uniform in the open interval (0, 1).
    double uniform_open() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;
    bool bernoulli(double p) noexcept { return uniform() < p; }
    double normal() noexcept;

    void fill_normal(Tensor& t, float stddev = 1.0F) noexcept;
    void fill_uniform(Tensor& t, float lo, float hi) noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a64(std::string_view s) noexcept;
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) noexcept;

}  // namespace nextshot
