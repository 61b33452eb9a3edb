// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nextshot/tensor.hpp"

namespace nextshot {

/// Token segments of the concatenated model input, in canonical order.
enum class SegmentKind : std::uint8_t { Rel = 0, IndCond = 1, IndTgt = 2, VisCond = 3, VisTgt = 4 };

inline constexpr std::size_t kSegmentCount = 5;
inline constexpr std::array<SegmentKind, kSegmentCount> kCanonicalOrder = {
    SegmentKind::Rel, SegmentKind::IndCond, SegmentKind::IndTgt, SegmentKind::VisCond, SegmentKind::VisTgt};

constexpr std::size_t index_of(SegmentKind k) noexcept { return static_cast<std::size_t>(k); }
constexpr bool is_text(SegmentKind k) noexcept {
    return k == SegmentKind::Rel || k == SegmentKind::IndCond || k == SegmentKind::IndTgt;
}
std::string_view to_string(SegmentKind k) noexcept;

/// Contiguous segment lengths and offsets for one run. The full layout holds
/// all five segments; the relational-prompt ablation drops Rel entirely.
class SegmentLayout {
public:
    static SegmentLayout build(std::size_t len_rel, std::size_t len_ind_cond, std::size_t len_ind_tgt,
                               std::size_t len_vis_cond, std::size_t len_vis_tgt);
    static SegmentLayout without_rel(std::size_t len_ind_cond, std::size_t len_ind_tgt, std::size_t len_vis_cond,
                                     std::size_t len_vis_tgt);

    bool has_rel() const noexcept { return lengths_[0] > 0; }
    bool has(SegmentKind k) const noexcept { return lengths_[index_of(k)] > 0; }
    std::size_t length(SegmentKind k) const noexcept { return lengths_[index_of(k)]; }
    std::size_t offset(SegmentKind k) const noexcept { return offsets_[index_of(k)]; }
    std::size_t end(SegmentKind k) const noexcept { return offsets_[index_of(k)] + lengths_[index_of(k)]; }
    std::size_t total() const noexcept { return total_; }

    /// Present segments in canonical order.
    std::vector<SegmentKind> segments() const;
    SegmentKind segment_of(std::size_t index) const;

    nlohmann::json to_json() const;
    static SegmentLayout from_json(const nlohmann::json& j);

    bool operator==(const SegmentLayout&) const = default;

private:
    SegmentLayout() = default;
    void finish();

    std::array<std::size_t, kSegmentCount> lengths_{};
    std::array<std::size_t, kSegmentCount> offsets_{};
    std::size_t total_ = 0;
};

inline SegmentLayout build_layout(std::size_t len_rel, std::size_t len_ind_cond, std::size_t len_ind_tgt,
                                  std::size_t len_vis_cond, std::size_t len_vis_tgt) {
    return SegmentLayout::build(len_rel, len_ind_cond, len_ind_tgt, len_vis_cond, len_vis_tgt);
}

inline SegmentKind segment_of(const SegmentLayout& layout, std::size_t index) { return layout.segment_of(index); }

/// Token matrix of one model input plus the layout that indexes it.
struct ModelInput {
    Tensor tokens;
    SegmentLayout layout;
    float diffusion_t = 0.0F;
};

ModelInput concat_model_input(const Tensor& c_rel, const Tensor& c_ind_cond, const Tensor& c_ind_tgt,
                              const Tensor& z_cond, const Tensor& z_tgt_noised, float t);
ModelInput concat_model_input_without_rel(const Tensor& c_ind_cond, const Tensor& c_ind_tgt, const Tensor& z_cond,
                                          const Tensor& z_tgt_noised, float t);

/// Rows of one segment as a new matrix.
Tensor extract_segment(const ModelInput& input, SegmentKind k);

}  // namespace nextshot
