// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nextshot/model.hpp"
#include "nextshot/rng.hpp"
#include "nextshot/tensor.hpp"

namespace nextshot {

// ---------------------------------------------------------------------------
// Scene description. Every attribute is a small discrete index so that prompt
// codes map one-to-one onto scene records.
// ---------------------------------------------------------------------------

enum class Shape : std::uint8_t { Circle, Square, Triangle };
inline constexpr int kShapeCount = 3;
inline constexpr int kColorCount = 8;
inline constexpr int kPaletteCount = 8;
inline constexpr int kLocationCount = 4;
inline constexpr int kAngleCount = 4;
inline constexpr int kGridSteps = 5;     // subject centers on a 5x5 grid
inline constexpr int kSizeLevels = 3;
inline constexpr int kLightingLevels = 6;  // 0, 0.2, ..., 1.0
inline constexpr int kZoomLevels = 4;      // 0.5, 1, 2, 4

std::string_view to_string(Shape s) noexcept;

struct Subject {
    Shape shape = Shape::Circle;
    int color = 0;
    int gx = 2;  // grid column, center x = 0.3 + 0.1 gx
    int gy = 2;
    int size = 1;

    float center_x() const noexcept { return 0.3F + 0.1F * static_cast<float>(gx); }
    float center_y() const noexcept { return 0.3F + 0.1F * static_cast<float>(gy); }
    float half_extent() const noexcept { return 0.15F + 0.05F * static_cast<float>(size); }
    bool operator==(const Subject&) const = default;
};

struct Camera {
    int zoom = 1;  // index into {0.5, 1, 2, 4}
    bool flip = false;
    int angle = 0;

    float zoom_factor() const noexcept;
    bool operator==(const Camera&) const = default;
};

struct Scene {
    Subject primary;
    std::optional<Subject> secondary;
    int palette = 0;
    int location = 0;
    float lighting = 1.0F;  // in [0, 1]; generated scenes use multiples of 0.2
    Camera camera;

    /// Frame center: the middle of the world at zoom <= 1, otherwise the
    /// primary subject clamped so the frame stays inside the world.
    std::array<float, 2> camera_center() const noexcept;
    void validate() const;

    nlohmann::json to_json() const;
    static Scene from_json(const nlohmann::json& j);
    bool operator==(const Scene&) const = default;
};

/// h x h x 3 image with values in [0, 1].
Tensor render_scene(const Scene& scene, std::size_t size);

/// Every base color the renderer paints: subject colors, then each palette's
/// sky and ground.
std::vector<std::array<float, 3>> reference_colors();

// ---------------------------------------------------------------------------
// Edit patterns
// ---------------------------------------------------------------------------

enum class EditPattern : std::uint8_t { ShotReverseShot, CutIn, CutOut, Cutaway, MultiAngle };
inline constexpr std::size_t kPatternCount = 5;
inline constexpr std::array<EditPattern, kPatternCount> kAllPatterns = {
    EditPattern::ShotReverseShot, EditPattern::CutIn, EditPattern::CutOut, EditPattern::Cutaway,
    EditPattern::MultiAngle};

std::string_view to_string(EditPattern p) noexcept;
EditPattern parse_pattern(std::string_view s);

/// CutIn doubles zoom around the subject, CutOut halves it, ShotReverseShot
/// flips the camera and swaps the two subjects' appearance, Cutaway replaces
/// the subject, MultiAngle rotates the camera angle. Throws when the scene
/// cannot take the edit.
Scene apply_edit(const Scene& scene, EditPattern pattern);

// ---------------------------------------------------------------------------
// Hierarchical prompts
// ---------------------------------------------------------------------------

struct RelationalPrompt {
    EditPattern pattern = EditPattern::CutIn;
    int palette = 0;
    int lighting = 0;  // lighting level
    int location = 0;
    bool identity_kept = true;
    int zoom_relation = 0;  // 0 same, 1 closer, 2 wider
    bool operator==(const RelationalPrompt&) const = default;
};

struct IndividualPrompt {
    // summary
    Shape shape = Shape::Circle;
    int color = 0;
    int location = 0;
    int palette = 0;
    // detail (droppable)
    int size = 0;
    int secondary = 0;      // 0 none, else 1 + shape * 8 + color
    int secondary_pos = 0;  // 0 none, else 1 + gy * 5 + gx
    // cinematography (droppable)
    int zoom = 1;
    int position = 12;  // gy * 5 + gx of the primary subject
    int angle = 0;
    bool flip = false;
    bool operator==(const IndividualPrompt&) const = default;
};

struct HierarchicalPrompt {
    RelationalPrompt relational;
    IndividualPrompt cond;
    IndividualPrompt tgt;
    bool operator==(const HierarchicalPrompt&) const = default;
};

HierarchicalPrompt describe_pair(const Scene& cond, const Scene& tgt, EditPattern pattern);
IndividualPrompt describe_shot(const Scene& scene);

/// Scene reconstructed from one shot's individual prompt and the shared
/// relational prompt.
Scene decode_scene(const RelationalPrompt& rel, const IndividualPrompt& ind);

/// Code tables. PAD is 0; each field owns a disjoint code range.
inline constexpr std::int32_t kPadCode = 0;
inline constexpr std::size_t kRelationalLength = 6;
inline constexpr std::size_t kIndividualLength = 11;
/// Positions inside an individual prompt that prompt dropout may blank.
inline constexpr std::array<std::size_t, 7> kDroppableFields = {4, 5, 6, 7, 8, 9, 10};
std::size_t prompt_vocab_size() noexcept;

std::vector<std::int32_t> relational_codes(const RelationalPrompt& p);
std::vector<std::int32_t> individual_codes(const IndividualPrompt& p);
RelationalPrompt decode_relational(std::span<const std::int32_t> codes);
/// PAD entries decode to the field default.
IndividualPrompt decode_individual(std::span<const std::int32_t> codes);

/// Maps a prompt to fixed-length code sequences. When `training`, every
/// droppable individual field is independently replaced by PAD with
/// probability `dropout`. Sequences are padded with PAD to the requested
/// lengths, which may not be shorter than the natural ones.
PromptCodes encode_prompt(const HierarchicalPrompt& prompt, float dropout, Rng& rng, bool training,
                          std::size_t rel_len = kRelationalLength, std::size_t ind_len = kIndividualLength);

struct PromptEmbeddings {
    Tensor rel, ind_cond, ind_tgt;
};
/// Looks up rows of an embedding table; unknown codes throw.
PromptEmbeddings embed_prompt(const PromptCodes& codes, const Tensor& table);

// ---------------------------------------------------------------------------
// Shot pairs and datasets
// ---------------------------------------------------------------------------

struct ShotPair {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    EditPattern pattern = EditPattern::CutIn;
    Scene cond_scene;
    Scene tgt_scene;
    HierarchicalPrompt prompt;
    Tensor cond;  // image
    Tensor tgt;   // image
    bool curated = false;
};

/// Samples a scene suited to `pattern`.
Scene sample_scene(Rng& rng, EditPattern pattern);
ShotPair make_pair(std::uint64_t seed, EditPattern pattern, std::size_t image_size);

using PatternMix = std::array<double, kPatternCount>;
/// Parses "cut-in=0.5,cutaway=0.5"; "uniform" gives equal weights.
PatternMix parse_mix(std::string_view s);
void validate_mix(const PatternMix& mix);
/// Per-pattern counts by largest remainder; sums to n.
std::array<std::size_t, kPatternCount> mix_counts(const PatternMix& mix, std::size_t n);

struct DatasetSpec {
    std::size_t count = 100;
    PatternMix mix{0.2, 0.2, 0.2, 0.2, 0.2};
    std::uint64_t seed = 0;
    std::size_t image_size = 32;
    std::string split = "train";  // "train" or "heldout"
};

/// Pair seeds of the held-out split live in a range disjoint from training.
std::uint64_t pair_seed(const DatasetSpec& spec, std::size_t index);
std::vector<ShotPair> generate_dataset(const DatasetSpec& spec);

struct CurationCriteria {
    std::optional<float> min_lighting;  // strict: lighting > value
    bool require_secondary = false;
    bool balance_patterns = false;
    std::function<bool(const ShotPair&)> accept;  // optional extra predicate
};

/// Marks pairs meeting the criteria as curated and returns them in input
/// order. Balancing keeps the first m pairs of each pattern, m being the
/// smallest surviving pattern count.
std::vector<ShotPair> curate(const std::vector<ShotPair>& pairs, const CurationCriteria& criteria);

// ---------------------------------------------------------------------------
// Manifests: one JSON object per line; images stored as tensor files next to
// the manifest.
// ---------------------------------------------------------------------------

nlohmann::json pair_record(const ShotPair& pair, const std::string& cond_path, const std::string& tgt_path);
void write_manifest(const std::filesystem::path& dir, const std::vector<ShotPair>& pairs,
                    const nlohmann::json& provenance);
std::vector<ShotPair> read_manifest(const std::filesystem::path& manifest);
nlohmann::json read_provenance(const std::filesystem::path& manifest);

// ---------------------------------------------------------------------------
// Latents
// ---------------------------------------------------------------------------

/// Image in [0, 1] -> patch latents in [-1, 1].
Tensor encode_latent(const Tensor& image, std::size_t patch);
Tensor decode_latent(const Tensor& latent, std::size_t image_size, std::size_t patch);

}  // namespace nextshot
