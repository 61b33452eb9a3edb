// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>

#include "nextshot/tensor.hpp"

namespace nextshot {

// On-disk record: 8-byte magic, u32 rank, rank x u64 extents, then the
// row-major float32 payload. All fields little-endian.
inline constexpr std::array<char, 8> kTensorMagic = {'N', 'S', 'T', 'E', 'N', 'S', 'R', '1'};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace nextshot
