// SPDX-License-Identifier: Apache-2.0
#include "nextshot/layout.hpp"

#include <stdexcept>
#include <string>

namespace nextshot {

std::string_view to_string(SegmentKind k) noexcept {
    switch (k) {
        case SegmentKind::Rel: return "rel";
        case SegmentKind::IndCond: return "ind_cond";
        case SegmentKind::IndTgt: return "ind_tgt";
        case SegmentKind::VisCond: return "vis_cond";
        case SegmentKind::VisTgt: return "vis_tgt";
    }
    return "?";
}

SegmentLayout SegmentLayout::build(std::size_t len_rel, std::size_t len_ind_cond, std::size_t len_ind_tgt,
                                   std::size_t len_vis_cond, std::size_t len_vis_tgt) {
    SegmentLayout l;
    l.lengths_ = {len_rel, len_ind_cond, len_ind_tgt, len_vis_cond, len_vis_tgt};
    for (SegmentKind k : kCanonicalOrder) {
        if (l.lengths_[index_of(k)] == 0) {
            throw std::invalid_argument("segment " + std::string(to_string(k)) +
                                        " has length 0; every segment needs at least one token");
        }
    }
    l.finish();
    return l;
}

SegmentLayout SegmentLayout::without_rel(std::size_t len_ind_cond, std::size_t len_ind_tgt,
                                         std::size_t len_vis_cond, std::size_t len_vis_tgt) {
    SegmentLayout l;
    l.lengths_ = {0, len_ind_cond, len_ind_tgt, len_vis_cond, len_vis_tgt};
    for (std::size_t i = 1; i < kSegmentCount; ++i) {
        if (l.lengths_[i] == 0) {
            throw std::invalid_argument("segment " + std::string(to_string(kCanonicalOrder[i])) +
                                        " has length 0; every segment needs at least one token");
        }
    }
    l.finish();
    return l;
}

void SegmentLayout::finish() {
    std::size_t off = 0;
    for (std::size_t i = 0; i < kSegmentCount; ++i) {
        offsets_[i] = off;
        off += lengths_[i];
    }
    total_ = off;
}

std::vector<SegmentKind> SegmentLayout::segments() const {
    std::vector<SegmentKind> out;
    for (SegmentKind k : kCanonicalOrder) {
        if (has(k)) out.push_back(k);
    }
    return out;
}

SegmentKind SegmentLayout::segment_of(std::size_t index) const {
    if (index >= total_) {
        throw std::out_of_range("token index " + std::to_string(index) + " outside layout of " +
                                std::to_string(total_) + " tokens");
    }
    for (std::size_t i = kSegmentCount; i-- > 0;) {
        if (lengths_[i] > 0 && index >= offsets_[i]) return kCanonicalOrder[i];
    }
    return SegmentKind::Rel;  // unreachable: index < total implies a hit above
}

nlohmann::json SegmentLayout::to_json() const {
    nlohmann::json j;
    for (SegmentKind k : kCanonicalOrder) j[std::string(to_string(k))] = length(k);
    return j;
}

SegmentLayout SegmentLayout::from_json(const nlohmann::json& j) {
    const auto rel = j.at("rel").get<std::size_t>();
    const auto ic = j.at("ind_cond").get<std::size_t>();
    const auto it = j.at("ind_tgt").get<std::size_t>();
    const auto zc = j.at("vis_cond").get<std::size_t>();
    const auto zt = j.at("vis_tgt").get<std::size_t>();
    return rel == 0 ? without_rel(ic, it, zc, zt) : build(rel, ic, it, zc, zt);
}

namespace {

ModelInput assemble(std::vector<const Tensor*> parts, SegmentLayout layout, float t) {
    if (!(t >= 0.0F && t <= 1.0F)) {
        throw std::invalid_argument("diffusion t " + std::to_string(t) + " outside [0, 1]");
    }
    const std::size_t d = parts.front()->cols();
    for (const Tensor* p : parts) {
        if (p->cols() != d) {
            throw std::invalid_argument("segment width mismatch: " + std::to_string(p->cols()) + " vs " +
                                        std::to_string(d));
        }
    }
    return ModelInput{concat_rows(parts), layout, t};
}

}  // namespace

ModelInput concat_model_input(const Tensor& c_rel, const Tensor& c_ind_cond, const Tensor& c_ind_tgt,
                              const Tensor& z_cond, const Tensor& z_tgt_noised, float t) {
    auto layout = SegmentLayout::build(c_rel.rows(), c_ind_cond.rows(), c_ind_tgt.rows(), z_cond.rows(),
                                       z_tgt_noised.rows());
    return assemble({&c_rel, &c_ind_cond, &c_ind_tgt, &z_cond, &z_tgt_noised}, layout, t);
}

ModelInput concat_model_input_without_rel(const Tensor& c_ind_cond, const Tensor& c_ind_tgt, const Tensor& z_cond,
                                          const Tensor& z_tgt_noised, float t) {
    auto layout =
        SegmentLayout::without_rel(c_ind_cond.rows(), c_ind_tgt.rows(), z_cond.rows(), z_tgt_noised.rows());
    return assemble({&c_ind_cond, &c_ind_tgt, &z_cond, &z_tgt_noised}, layout, t);
}

Tensor extract_segment(const ModelInput& input, SegmentKind k) {
    if (!input.layout.has(k)) {
        throw std::invalid_argument("layout has no " + std::string(to_string(k)) + " segment");
    }
    return input.tokens.slice_rows(input.layout.offset(k), input.layout.length(k));
}

}  // namespace nextshot
