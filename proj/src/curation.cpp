// SPDX-License-Identifier: Apache-2.0
#include "nextshot/curation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "nextshot/rng.hpp"
#include "nextshot/tensor_io.hpp"

namespace nextshot {

void FrameStream::validate() const {
    if (frames.size() < 2) throw std::invalid_argument("frame stream needs at least 2 frames");
    for (const Tensor& f : frames) {
        if (f.shape() != frames.front().shape()) {
            throw std::invalid_argument("frame stream mixes shapes " + frames.front().shape_string() + " and " +
                                        f.shape_string());
        }
    }
    if (frames.front().rank() != 3 || frames.front().dim(2) != 3) {
        throw std::invalid_argument("frames must be H x W x 3, got " + frames.front().shape_string());
    }
    if (!scenes.empty() && scenes.size() != frames.size()) throw std::invalid_argument("one scene per frame required");
}

Tensor FrameStream::stacked() const {
    validate();
    const auto& s = frames.front().shape();
    Tensor out({frames.size(), s[0], s[1], s[2]});
    const std::size_t per = frames.front().size();
    for (std::size_t i = 0; i < frames.size(); ++i) std::copy_n(frames[i].data(), per, out.data() + i * per);
    return out;
}

FrameStream FrameStream::from_stacked(const Tensor& t) {
    if (t.rank() != 4) throw std::invalid_argument("frame stream tensor must be F x H x W x 3, got " + t.shape_string());
    FrameStream s;
    const std::size_t per = t.dim(1) * t.dim(2) * t.dim(3);
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        Tensor f({t.dim(1), t.dim(2), t.dim(3)});
        std::copy_n(t.data() + i * per, per, f.data());
        s.frames.push_back(std::move(f));
    }
    s.validate();
    return s;
}

double frame_difference(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("frame_difference: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return s / static_cast<double>(a.size());
}

std::vector<ShotSpan> detect_shots(const FrameStream& stream, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("detect_shots: threshold must be positive");
    stream.validate();
    std::vector<ShotSpan> spans;
    std::size_t begin = 0;
    for (std::size_t i = 0; i + 1 < stream.frames.size(); ++i) {
        if (frame_difference(stream.frames[i + 1], stream.frames[i]) > threshold) {
            spans.push_back({begin, i + 1});
            begin = i + 1;
        }
    }
    spans.push_back({begin, stream.frames.size()});
    return spans;
}

std::vector<std::size_t> cut_indices(const std::vector<ShotSpan>& spans) {
    std::vector<std::size_t> cuts;
    for (std::size_t i = 1; i < spans.size(); ++i) cuts.push_back(spans[i].begin);
    return cuts;
}

void ScorerSet::validate() const {
    if (!aesthetic || !quality || !motion || !text_overlay || !nsfw) {
        throw std::invalid_argument("scorer set is incomplete");
    }
}

std::vector<KeyframeRecord> select_keyframes(const FrameStream& stream, const std::vector<ShotSpan>& spans,
                                             const ScorerSet& scorers, double motion_cutoff, std::size_t stride) {
    scorers.validate();
    if (stride == 0) throw std::invalid_argument("select_keyframes: stride must be >= 1");
    std::vector<KeyframeRecord> out;
    for (const ShotSpan& span : spans) {
        if (span.begin >= span.end || span.end > stream.frames.size()) {
            throw std::invalid_argument("select_keyframes: span outside the stream");
        }
        const double motion = scorers.motion(stream, span);
        if (!std::isfinite(motion)) throw std::runtime_error("motion scorer returned a non-finite value");
        if (motion > motion_cutoff) continue;
        KeyframeRecord rec;
        rec.span = span;
        rec.motion = motion;
        rec.aesthetic = -std::numeric_limits<double>::infinity();
        for (std::size_t f = span.begin; f < span.end; f += stride) {
            const double a = scorers.aesthetic(stream, f);
            if (!std::isfinite(a)) throw std::runtime_error("aesthetic scorer returned a non-finite value");
            if (a > rec.aesthetic) {
                rec.aesthetic = a;
                rec.frame = f;
            }
        }
        rec.quality = scorers.quality(stream, rec.frame);
        if (!std::isfinite(rec.quality)) throw std::runtime_error("quality scorer returned a non-finite value");
        rec.text = scorers.text_overlay(stream, rec.frame);
        rec.nsfw = scorers.nsfw(stream, rec.frame);
        out.push_back(rec);
    }
    if (out.empty()) std::clog << "warning: every shot exceeded the motion cutoff\n";
    return out;
}

std::vector<KeyframeRecord> filter_keyframes(const std::vector<KeyframeRecord>& records,
                                             const FilterThresholds& thresholds) {
    std::vector<KeyframeRecord> out;
    for (const KeyframeRecord& r : records) {
        if (r.aesthetic >= thresholds.aesthetic && r.quality >= thresholds.quality && !r.text && !r.nsfw) {
            out.push_back(r);
        }
    }
    return out;
}

std::vector<std::pair<KeyframeRecord, KeyframeRecord>> pair_adjacent(const std::vector<KeyframeRecord>& records) {
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].span.begin < records[i - 1].span.begin) {
            throw std::invalid_argument("pair_adjacent: records are not ordered by span start");
        }
    }
    std::vector<std::pair<KeyframeRecord, KeyframeRecord>> pairs;
    for (std::size_t i = 1; i < records.size(); ++i) pairs.emplace_back(records[i - 1], records[i]);
    return pairs;
}

// ---------------------------------------------------------------------------
// Synthetic scorers and streams
// ---------------------------------------------------------------------------

namespace {

double centrality(const Tensor& img) {
    const std::size_t h = img.dim(0);
    const std::size_t w = img.dim(1);
    double mean[3] = {0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < h * w; ++i) {
        for (int c = 0; c < 3; ++c) mean[c] += img[i * 3 + c];
    }
    for (double& m : mean) m /= static_cast<double>(h * w);
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double wt = 0.0;
            for (int k = 0; k < 3; ++k) wt += std::abs(img[(r * w + c) * 3 + k] - mean[k]);
            sw += wt;
            sx += wt * (static_cast<double>(c) + 0.5) / static_cast<double>(w);
            sy += wt * (static_cast<double>(r) + 0.5) / static_cast<double>(h);
        }
    }
    if (sw <= 0.0) return 0.0;
    const double dx = sx / sw - 0.5;
    const double dy = sy / sw - 0.5;
    return std::clamp(1.0 - 2.0 * std::sqrt(dx * dx + dy * dy), 0.0, 1.0);
}

double sharpness(const Tensor& img) {
    const std::size_t h = img.dim(0);
    const std::size_t w = img.dim(1);
    double s = 0.0;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c + 1 < w; ++c) {
            for (int k = 0; k < 3; ++k) {
                const double d = img[(r * w + c + 1) * 3 + k] - img[(r * w + c) * 3 + k];
                s += d * d;
            }
        }
    }
    return 1.0 / (1.0 + 100.0 * s / static_cast<double>(h * (w - 1) * 3));
}

bool top_banner(const Tensor& img) {
    const std::size_t w = img.dim(1);
    const std::size_t rows = std::min<std::size_t>(2, img.dim(0));
    for (std::size_t i = 0; i < rows * w * 3; ++i) {
        if (img[i] < 0.97F) return false;
    }
    return true;
}

}  // namespace

ScorerSet synthetic_scorers() {
    ScorerSet s;
    s.aesthetic = [](const FrameStream& st, std::size_t f) { return centrality(st.frames.at(f)); };
    s.quality = [](const FrameStream& st, std::size_t f) { return sharpness(st.frames.at(f)); };
    s.motion = [](const FrameStream& st, const ShotSpan& span) {
        if (span.length() < 2) return 0.0;
        double m = 0.0;
        for (std::size_t i = span.begin; i + 1 < span.end; ++i) m += frame_difference(st.frames[i + 1], st.frames[i]);
        return m / static_cast<double>(span.length() - 1);
    };
    s.text_overlay = [](const FrameStream& st, std::size_t f) { return top_banner(st.frames.at(f)); };
    s.nsfw = [](const FrameStream&, std::size_t) { return false; };
    return s;
}

FrameStream synthetic_stream(const StreamSpec& spec) {
    constexpr double kMinShotContrast = 0.15;
    if (spec.shots == 0 || spec.min_frames == 0 || spec.max_frames < spec.min_frames) {
        throw std::invalid_argument("stream spec needs >= 1 shot and 1 <= min_frames <= max_frames");
    }
    const Rng root(spec.seed);
    FrameStream st;
    int prev_palette = -1;
    Tensor prev_base;
    for (std::size_t s = 0; s < spec.shots; ++s) {
        Rng rng = root.split(static_cast<std::uint64_t>(s));
        Scene scene;
        Tensor base;
        // Neighbouring shots must stay well apart so every planted cut is visible.
        for (int attempt = 0;; ++attempt) {
            if (attempt == 256) throw std::runtime_error("synthetic_stream: no scene differs enough from its neighbour");
            scene = sample_scene(rng, EditPattern::MultiAngle);
            while (scene.palette == prev_palette) scene.palette = static_cast<int>(rng.below(kPaletteCount));
            base = render_scene(scene, spec.image_size);
            if (prev_base.empty() || frame_difference(base, prev_base) >= kMinShotContrast) break;
        }
        prev_palette = scene.palette;
        prev_base = base;
        const std::size_t frames = spec.min_frames + rng.below(spec.max_frames - spec.min_frames + 1);
        const float amp = rng.bernoulli(spec.shaky_fraction) ? 3.0F * spec.jitter : spec.jitter;
        if (s > 0) st.planted_cuts.push_back(st.frames.size());
        for (std::size_t f = 0; f < frames; ++f) {
            Tensor img = base;
            for (float& v : img.values()) v = std::clamp(v + static_cast<float>(rng.uniform(-amp, amp)), 0.0F, 1.0F);
            st.frames.push_back(std::move(img));
            st.scenes.push_back(scene);
        }
    }
    st.validate();
    return st;
}

PipelineResult run_curation(const FrameStream& stream, const ScorerSet& scorers, const PipelineConfig& config) {
    PipelineResult r;
    r.spans = detect_shots(stream, config.cut_threshold);
    r.keyframes = select_keyframes(stream, r.spans, scorers, config.motion_cutoff, config.stride);
    r.filtered = filter_keyframes(r.keyframes, config.thresholds);
    r.pairs = pair_adjacent(r.filtered);
    return r;
}

void write_keyframe_manifest(const std::filesystem::path& dir, const FrameStream& stream,
                             const PipelineResult& result, const nlohmann::json& provenance) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream os(dir / "manifest.jsonl", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
    const bool labeled = !stream.scenes.empty();
    for (std::size_t i = 0; i < result.pairs.size(); ++i) {
        const auto& [a, b] = result.pairs[i];
        char stem[32];
        std::snprintf(stem, sizeof(stem), "%06zu", i);
        const std::string cond = std::string("images/") + stem + "_cond.nst";
        const std::string tgt = std::string("images/") + stem + "_tgt.nst";
        save_tensor(dir / cond, stream.frames[a.frame]);
        save_tensor(dir / tgt, stream.frames[b.frame]);
        nlohmann::json rec{{"id", i},
                           {"seed", nullptr},
                           {"pattern", nullptr},
                           {"prompt", nullptr},
                           {"curated", true},
                           {"cond", cond},
                           {"tgt", tgt},
                           {"source", {{"cond_frame", a.frame}, {"tgt_frame", b.frame}}}};
        rec["cond_scene"] = labeled ? stream.scenes[a.frame].to_json() : nlohmann::json(nullptr);
        rec["tgt_scene"] = labeled ? stream.scenes[b.frame].to_json() : nlohmann::json(nullptr);
        os << rec.dump() << '\n';
    }
    std::ofstream ps(dir / "provenance.json", std::ios::binary);
    ps << provenance.dump(2) << '\n';
    if (!os || !ps) throw std::runtime_error("failed writing manifest in " + dir.string());
}

}  // namespace nextshot
