// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nextshot/tensor.hpp"
#include "nextshot/world.hpp"

namespace nextshot {

using Embedding = std::vector<double>;

struct ImageEmbedder {
    std::string name;
    std::size_t dim = 0;
    std::function<Embedding(const Tensor&)> embed;
};

/// Embeds the individual prompt of one shot, read together with the shared
/// relational prompt.
struct TextEmbedder {
    std::string name;
    std::size_t dim = 0;
    std::function<Embedding(const RelationalPrompt&, const IndividualPrompt&)> embed;
};

double cosine(std::span<const double> a, std::span<const double> b);

/// Mean cosine between embeddings of aligned condition and generated images.
/// Per-pair values are summed in sorted order, so list order never matters.
double consistency(const ImageEmbedder& embedder, std::span<const Tensor> conds, std::span<const Tensor> gens);

/// Mean cosine between each generated image and its target-shot prompt.
double text_fidelity(const ImageEmbedder& image, const TextEmbedder& text, std::span<const Tensor> gens,
                     std::span<const HierarchicalPrompt> prompts);

/// Frechet distance between Gaussian fits of two embedding sets, with
/// `shrinkage` added to both covariance diagonals. Embeddings are sorted
/// before accumulation so the value does not depend on set order.
double fid(const std::vector<Embedding>& a, const std::vector<Embedding>& b, double shrinkage = 1e-6);

/// Histogram over the renderer's base colors by nearest chromaticity, plus a
/// bin for near-black pixels. Chromaticity ignores the lighting multiplier.
ImageEmbedder palette_embedder();
/// Fixed Gaussian projection of centered pixels.
ImageEmbedder projection_embedder(std::size_t image_size, std::size_t dim = 16, std::uint64_t seed = 0);
/// Renders the scene a prompt describes and embeds the rendering.
TextEmbedder render_text_embedder(const ImageEmbedder& image, std::size_t image_size);

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
    double consistency_a = 0.0;  // palette (oracle) embedder
    double consistency_b = 0.0;  // projection embedder
    double text_fidelity = 0.0;
    double fid = 0.0;
    std::size_t count = 0;
    std::string config_hash;
    std::string embedder_a;
    std::string embedder_b;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Generated and ground-truth pairs are matched by id; the generated pair's
/// `tgt` holds the sample. Missing ids on either side throw, listing them.
EvalReport evaluate(const std::vector<ShotPair>& generated, const std::vector<ShotPair>& ground_truth,
                    const ImageEmbedder& a, const ImageEmbedder& b, const TextEmbedder& text,
                    std::string config_hash = {});

/// Side-by-side table of two reports with per-metric deltas.
std::string format_report_diff(const EvalReport& ours, const EvalReport& baseline, std::string_view ours_name,
                               std::string_view baseline_name);

}  // namespace nextshot
