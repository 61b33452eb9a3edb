// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "nextshot/kernels.hpp"
#include "nextshot/layout.hpp"
#include "nextshot/tensor.hpp"

namespace nextshot {

/// reach[query][key] over SegmentKind indices.
using BlockReachability = std::array<std::array<bool, kSegmentCount>, kSegmentCount>;

/// The fixed segment-level attention pattern:
///   visual segments attend to each other and to themselves;
///   each individual prompt pairs only with its own visual segment;
///   the relational prompt bridges both visual segments;
///   no text segment attends to another text segment.
BlockReachability ham_block_matrix() noexcept;

/// Token-level expansion of the block matrix for one layout.
struct AttentionMask {
    Tensor mask;  // n x n, entries 0 or 1
    SegmentLayout layout;
};

/// Dense mask, cached per layout. Layouts without Rel drop its row/column.
const AttentionMask& build_ham(const SegmentLayout& layout);

bool is_attention_allowed(const SegmentLayout& layout, std::size_t query, std::size_t key);

/// Per-query allowed key ranges derived from the block matrix without
/// materializing the dense mask. Equal to key_ranges_from_mask(build_ham(l).mask).
std::vector<KeyRanges> ham_key_ranges(const SegmentLayout& layout);

/// Block matrix restricted to the layout's segments, one row per line.
std::string format_block_matrix(const SegmentLayout& layout);

/// Binary PGM (P5) of the token mask, 255 = allowed.
void write_mask_pgm(std::ostream& os, const AttentionMask& mask);

}  // namespace nextshot
