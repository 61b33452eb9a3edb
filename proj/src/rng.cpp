// SPDX-License-Identifier: Apache-2.0
#include "nextshot/rng.hpp"

#include <cmath>
#include <numbers>

#include "nextshot/tensor.hpp"

namespace nextshot {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view s) noexcept { return fnv1a64(s.data(), s.size()); }

Rng Rng::split(std::string_view label) const noexcept {
    return Rng(mix64(seed_ ^ mix64(fnv1a64(label))));
}

Rng Rng::split(std::uint64_t label) const noexcept {
    return Rng(mix64(seed_ ^ mix64(label ^ 0xA5A5A5A55A5A5A5AULL)));
}

std::uint64_t Rng::next_u64() noexcept {
    return mix64(seed_ + 0x9E3779B97F4A7C15ULL * (++counter_));
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift with rejection keeps the result unbiased.
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
        const std::uint64_t threshold = (0 - n) % n;
        while (low < threshold) {
            x = next_u64();
            m = static_cast<__uint128_t>(x) * n;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() noexcept {
    // Box-Muller, one variate per call so the stream position is easy to reason about.
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void Rng::fill_normal(Tensor& t, float stddev) noexcept {
    for (float& v : t.values()) v = static_cast<float>(normal() * stddev);
}

void Rng::fill_uniform(Tensor& t, float lo, float hi) noexcept {
    for (float& v : t.values()) v = static_cast<float>(uniform(lo, hi));
}

}  // namespace nextshot
