// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nextshot/tensor.hpp"
#include "nextshot/world.hpp"

namespace nextshot {

/// Ordered frames of equal shape; planted cuts are indices i such that a new
/// shot starts at frame i.
struct FrameStream {
    std::vector<Tensor> frames;
    std::vector<std::size_t> planted_cuts;
    std::vector<Scene> scenes;  // per-frame ground truth when known

    void validate() const;
    /// Frames stacked into one F x H x W x 3 tensor, and back.
    Tensor stacked() const;
    static FrameStream from_stacked(const Tensor& t);
};

struct ShotSpan {
    std::size_t begin = 0;  // inclusive
    std::size_t end = 0;    // exclusive
    std::size_t length() const noexcept { return end - begin; }
    bool operator==(const ShotSpan&) const = default;
};

double frame_difference(const Tensor& a, const Tensor& b);

/// Declares a cut between frames i and i + 1 when their mean absolute
/// difference exceeds `threshold`.
std::vector<ShotSpan> detect_shots(const FrameStream& stream, double threshold);
std::vector<std::size_t> cut_indices(const std::vector<ShotSpan>& spans);

/// Scorers see the whole stream so test tables can be keyed by frame index.
struct ScorerSet {
    std::function<double(const FrameStream&, std::size_t)> aesthetic;
    std::function<double(const FrameStream&, std::size_t)> quality;
    std::function<double(const FrameStream&, const ShotSpan&)> motion;
    std::function<bool(const FrameStream&, std::size_t)> text_overlay;
    std::function<bool(const FrameStream&, std::size_t)> nsfw;

    void validate() const;
};

struct KeyframeRecord {
    ShotSpan span;
    std::size_t frame = 0;
    double motion = 0.0;
    double aesthetic = 0.0;
    double quality = 0.0;
    bool text = false;
    bool nsfw = false;
};

/// Drops spans whose motion exceeds `motion_cutoff`, then picks the
/// highest-aesthetic frame of each remaining span (ties to the lowest index)
/// among frames begin, begin + stride, ...
std::vector<KeyframeRecord> select_keyframes(const FrameStream& stream, const std::vector<ShotSpan>& spans,
                                             const ScorerSet& scorers, double motion_cutoff,
                                             std::size_t stride = 1);

struct FilterThresholds {
    double aesthetic = -std::numeric_limits<double>::infinity();
    double quality = -std::numeric_limits<double>::infinity();
};

/// Keeps records with aesthetic >= threshold, quality >= threshold and
/// neither text nor nsfw flags.
std::vector<KeyframeRecord> filter_keyframes(const std::vector<KeyframeRecord>& records,
                                             const FilterThresholds& thresholds);

/// (r0, r1), (r1, r2), ...; records must be ordered by span start.
std::vector<std::pair<KeyframeRecord, KeyframeRecord>> pair_adjacent(const std::vector<KeyframeRecord>& records);

/// Heuristic scorers: aesthetic rewards a centered subject, quality penalizes
/// pixel noise, motion is the mean frame difference inside a span, text flags
/// a saturated white banner along the top rows, nsfw is never raised.
ScorerSet synthetic_scorers();

struct StreamSpec {
    std::size_t shots = 6;
    std::size_t min_frames = 3;
    std::size_t max_frames = 8;
    std::size_t image_size = 16;
    float jitter = 0.02F;         // per-pixel uniform noise amplitude inside a shot
    float shaky_fraction = 0.25F;  // shots whose noise amplitude is tripled
    std::uint64_t seed = 0;
};

/// Shots of random scenes with distinct palettes between neighbours and a
/// clean-frame mean absolute difference of at least 0.15 across each cut; the
/// planted cuts mark every shot start after the first.
FrameStream synthetic_stream(const StreamSpec& spec);

struct PipelineConfig {
    double cut_threshold = 0.08;
    double motion_cutoff = 0.025;
    std::size_t stride = 1;
    FilterThresholds thresholds;
};

struct PipelineResult {
    std::vector<ShotSpan> spans;
    std::vector<KeyframeRecord> keyframes;
    std::vector<KeyframeRecord> filtered;
    std::vector<std::pair<KeyframeRecord, KeyframeRecord>> pairs;
};

PipelineResult run_curation(const FrameStream& stream, const ScorerSet& scorers, const PipelineConfig& config);

/// Writes the keyframe pairs with the same record keys as a dataset manifest;
/// scene and prompt fields are null when the stream carries no ground truth.
void write_keyframe_manifest(const std::filesystem::path& dir, const FrameStream& stream,
                             const PipelineResult& result, const nlohmann::json& provenance);

}  // namespace nextshot
