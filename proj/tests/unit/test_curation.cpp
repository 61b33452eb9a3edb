// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <stdexcept>

#include "doctest.h"
#include "nextshot/curation.hpp"

using namespace nextshot;

namespace {

FrameStream constant_frames(const std::vector<float>& levels) {
    FrameStream s;
    for (float v : levels) s.frames.push_back(Tensor({4, 4, 3}, v));
    return s;
}

// Scorers read fixed per-frame tables.
ScorerSet table_scorers(std::vector<double> aesthetic, std::vector<double> quality, double motion,
                        std::vector<bool> text = {}) {
    ScorerSet s;
    s.aesthetic = [aesthetic](const FrameStream&, std::size_t f) { return aesthetic.at(f); };
    s.quality = [quality](const FrameStream&, std::size_t f) { return quality.at(f); };
    s.motion = [motion](const FrameStream&, const ShotSpan&) { return motion; };
    s.text_overlay = [text](const FrameStream&, std::size_t f) { return !text.empty() && text.at(f); };
    s.nsfw = [](const FrameStream&, std::size_t) { return false; };
    return s;
}

std::vector<KeyframeRecord> random_records(Rng& rng, std::size_t n) {
    std::vector<KeyframeRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        KeyframeRecord r;
        r.span = {i * 3, i * 3 + 3};
        r.frame = i * 3 + rng.below(3);
        r.aesthetic = rng.uniform();
        r.quality = rng.uniform();
        r.text = rng.bernoulli(0.2);
        r.nsfw = rng.bernoulli(0.1);
        out.push_back(r);
    }
    return out;
}

}  // namespace

TEST_CASE("detect_shots: constant stream, alternating frames and threshold error") {
    const auto one = detect_shots(constant_frames({0.3F, 0.3F, 0.3F, 0.3F, 0.3F}), 0.08);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == ShotSpan{0, 5});

    const auto alt = detect_shots(constant_frames({0, 1, 0, 1}), 0.08);
    CHECK(alt.size() == 4);
    CHECK(cut_indices(alt) == std::vector<std::size_t>{1, 2, 3});
    CHECK_THROWS_AS(detect_shots(constant_frames({0, 1}), 0.0), std::invalid_argument);
    CHECK(frame_difference(Tensor({2, 2, 3}, 0.0F), Tensor({2, 2, 3}, 0.25F)) == 0.25);
}

TEST_CASE("detect_shots: recovers planted cuts and partitions the stream") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        StreamSpec spec;
        spec.seed = seed;
        const FrameStream s = synthetic_stream(spec);
        CAPTURE(seed);
        CHECK(s.planted_cuts.size() == spec.shots - 1);
        const auto spans = detect_shots(s, 0.08);
        CHECK(cut_indices(spans) == s.planted_cuts);
        std::size_t expect = 0;
        for (const ShotSpan& sp : spans) {
            CHECK(sp.begin == expect);
            CHECK(sp.length() >= 1);
            expect = sp.end;
        }
        CHECK(expect == s.frames.size());
        const FrameStream back = FrameStream::from_stacked(s.stacked());
        REQUIRE(back.frames.size() == s.frames.size());
        for (std::size_t i = 0; i < s.frames.size(); ++i) CHECK(bit_equal(back.frames[i], s.frames[i]));
    }
}

TEST_CASE("select_keyframes: argmax, ties, stride and motion cutoff") {
    const FrameStream s = constant_frames({0.5F, 0.5F, 0.5F});
    const std::vector<ShotSpan> span = {{0, 3}};
    const auto best = select_keyframes(s, span, table_scorers({0.1, 0.9, 0.4}, {1, 2, 3}, 0.0), 0.025);
    REQUIRE(best.size() == 1);
    CHECK(best[0].frame == 1);
    CHECK(best[0].aesthetic == 0.9);
    CHECK(best[0].quality == 2.0);

    const auto tie = select_keyframes(constant_frames({0.5F, 0.5F}), {{0, 2}}, table_scorers({0.5, 0.5}, {0, 0}, 0.0),
                                      0.025);
    REQUIRE(tie.size() == 1);
    CHECK(tie[0].frame == 0);

    const auto strided = select_keyframes(s, span, table_scorers({0.1, 0.9, 0.4}, {1, 2, 3}, 0.0), 0.025, 2);
    CHECK(strided[0].frame == 2);

    CHECK(select_keyframes(s, span, table_scorers({0.1, 0.9, 0.4}, {1, 2, 3}, 0.5), 0.025).empty());
    CHECK_THROWS_AS(select_keyframes(s, span, table_scorers({0.1, 0.9, 0.4}, {1, 2, 3}, 0.0), 0.025, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(select_keyframes(s, {{0, 4}}, table_scorers({0, 0, 0, 0}, {0, 0, 0, 0}, 0.0), 0.025),
                    std::invalid_argument);
    ScorerSet missing = table_scorers({0, 0, 0}, {0, 0, 0}, 0.0);
    missing.nsfw = nullptr;
    CHECK_THROWS_AS(select_keyframes(s, span, missing, 0.025), std::invalid_argument);
}

TEST_CASE("filter_keyframes: identity, text always set and a brute-force oracle") {
    Rng rng(1);
    std::vector<KeyframeRecord> clean = random_records(rng, 20);
    for (auto& r : clean) r.text = r.nsfw = false;
    CHECK(filter_keyframes(clean, {}).size() == clean.size());
    std::vector<KeyframeRecord> texted = clean;
    for (auto& r : texted) r.text = true;
    CHECK(filter_keyframes(texted, {}).empty());

    for (int trial = 0; trial < 30; ++trial) {
        const auto recs = random_records(rng, 25);
        const FilterThresholds th{rng.uniform(), rng.uniform()};
        std::vector<std::size_t> want;
        for (const auto& r : recs) {
            if (r.aesthetic >= th.aesthetic && r.quality >= th.quality && !r.text && !r.nsfw) want.push_back(r.frame);
        }
        std::vector<std::size_t> got;
        for (const auto& r : filter_keyframes(recs, th)) got.push_back(r.frame);
        CHECK(got == want);

        // Raising a threshold can only remove records.
        const FilterThresholds stricter{th.aesthetic + 0.1, th.quality};
        const auto tighter = filter_keyframes(recs, stricter);
        CHECK(tighter.size() <= got.size());
        for (const auto& r : tighter) CHECK(std::find(got.begin(), got.end(), r.frame) != got.end());
    }
}

TEST_CASE("pair_adjacent: counts, order and unordered input") {
    Rng rng(2);
    CHECK(pair_adjacent({}).empty());
    CHECK(pair_adjacent(random_records(rng, 1)).empty());
    CHECK(pair_adjacent(random_records(rng, 2)).size() == 1);
    const auto five = random_records(rng, 5);
    const auto pairs = pair_adjacent(five);
    REQUIRE(pairs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(pairs[i].first.frame == five[i].frame);
        CHECK(pairs[i].second.frame == five[i + 1].frame);
    }
    auto swapped = five;
    std::swap(swapped[1], swapped[3]);
    CHECK_THROWS_AS(pair_adjacent(swapped), std::invalid_argument);
}

TEST_CASE("run_curation: synthetic stream end to end") {
    StreamSpec spec;
    spec.seed = 4;
    spec.shots = 8;
    const FrameStream s = synthetic_stream(spec);
    const PipelineResult res = run_curation(s, synthetic_scorers(), PipelineConfig{});
    CHECK(cut_indices(res.spans) == s.planted_cuts);
    CHECK(res.keyframes.size() <= res.spans.size());
    CHECK(res.filtered.size() <= res.keyframes.size());
    CHECK(res.pairs.size() == (res.filtered.empty() ? 0 : res.filtered.size() - 1));
    for (const auto& k : res.keyframes) {
        CHECK(k.frame >= k.span.begin);
        CHECK(k.frame < k.span.end);
        CHECK(k.motion <= PipelineConfig{}.motion_cutoff);
    }
    PipelineConfig strict;
    strict.thresholds.aesthetic = 1e9;
    CHECK(run_curation(s, synthetic_scorers(), strict).pairs.empty());
}

TEST_CASE("synthetic_scorers: banner flags text, shaky shots score more motion") {
    const ScorerSet sc = synthetic_scorers();
    FrameStream s = constant_frames({0.2F});
    CHECK_FALSE(sc.text_overlay(s, 0));
    for (std::size_t c = 0; c < 2 * 4 * 3; ++c) s.frames[0][c] = 1.0F;
    CHECK(sc.text_overlay(s, 0));
    CHECK_FALSE(sc.nsfw(s, 0));

    const FrameStream still = constant_frames({0.4F, 0.4F, 0.4F});
    const FrameStream moving = constant_frames({0.4F, 0.45F, 0.4F});
    CHECK(sc.motion(still, {0, 3}) == 0.0);
    CHECK(sc.motion(moving, {0, 3}) > sc.motion(still, {0, 3}));
}
