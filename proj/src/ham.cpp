// SPDX-License-Identifier: Apache-2.0
#include "nextshot/ham.hpp"

#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace nextshot {

BlockReachability ham_block_matrix() noexcept {
    //                 Rel    IndC   IndT   VisC   VisT
    return {{{true, false, false, true, true},     // Rel
             {false, true, false, true, false},    // IndCond
             {false, false, true, false, true},    // IndTgt
             {true, true, false, true, true},      // VisCond
             {true, false, true, true, true}}};    // VisTgt
}

namespace {

using LayoutKey = std::array<std::size_t, kSegmentCount>;

LayoutKey key_of(const SegmentLayout& l) {
    LayoutKey k{};
    for (SegmentKind s : kCanonicalOrder) k[index_of(s)] = l.length(s);
    return k;
}

AttentionMask materialize(const SegmentLayout& layout) {
    const auto reach = ham_block_matrix();
    const std::size_t n = layout.total();
    Tensor m = Tensor::matrix(n, n);
    for (SegmentKind qs : layout.segments()) {
        for (SegmentKind ks : layout.segments()) {
            if (!reach[index_of(qs)][index_of(ks)]) continue;
            for (std::size_t i = layout.offset(qs); i < layout.end(qs); ++i) {
                for (std::size_t j = layout.offset(ks); j < layout.end(ks); ++j) m(i, j) = 1.0F;
            }
        }
    }
    return {std::move(m), layout};
}

}  // namespace

const AttentionMask& build_ham(const SegmentLayout& layout) {
    static std::mutex mu;
    static std::map<LayoutKey, AttentionMask> cache;
    std::lock_guard lock(mu);
    const auto key = key_of(layout);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, materialize(layout)).first;
    return it->second;
}

bool is_attention_allowed(const SegmentLayout& layout, std::size_t query, std::size_t key) {
    const auto qs = layout.segment_of(query);
    const auto ks = layout.segment_of(key);
    return ham_block_matrix()[index_of(qs)][index_of(ks)];
}

std::vector<KeyRanges> ham_key_ranges(const SegmentLayout& layout) {
    const auto reach = ham_block_matrix();
    const auto segs = layout.segments();
    std::vector<KeyRanges> rows(layout.total());
    for (SegmentKind qs : segs) {
        KeyRanges ranges;
        for (SegmentKind ks : segs) {
            if (!reach[index_of(qs)][index_of(ks)]) continue;
            const KeyRange r{layout.offset(ks), layout.end(ks)};
            if (!ranges.empty() && ranges.back().end == r.begin) {
                ranges.back().end = r.end;
            } else {
                ranges.push_back(r);
            }
        }
        for (std::size_t i = layout.offset(qs); i < layout.end(qs); ++i) rows[i] = ranges;
    }
    return rows;
}

std::string format_block_matrix(const SegmentLayout& layout) {
    const auto reach = ham_block_matrix();
    const auto segs = layout.segments();
    std::ostringstream os;
    os << "query\\key";
    for (SegmentKind k : segs) os << ' ' << to_string(k);
    os << '\n';
    for (SegmentKind q : segs) {
        os << to_string(q);
        for (SegmentKind k : segs) os << ' ' << (reach[index_of(q)][index_of(k)] ? 1 : 0);
        os << '\n';
    }
    return os.str();
}

void write_mask_pgm(std::ostream& os, const AttentionMask& mask) {
    const std::size_t n = mask.mask.rows();
    os << "P5\n" << n << ' ' << n << "\n255\n";
    for (std::size_t i = 0; i < mask.mask.size(); ++i) {
        os.put(mask.mask[i] != 0.0F ? static_cast<char>(255) : static_cast<char>(0));
    }
    if (!os) throw std::runtime_error("failed writing PGM");
}

}  // namespace nextshot
