// SPDX-License-Identifier: Apache-2.0
#include "nextshot/world.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "nextshot/tensor_io.hpp"

namespace nextshot {

namespace {

using Rgb = std::array<float, 3>;

constexpr std::array<Rgb, kColorCount> kSubjectColors = {{
    {0.90F, 0.10F, 0.10F},  // red
    {0.10F, 0.80F, 0.20F},  // green
    {0.15F, 0.25F, 0.90F},  // blue
    {0.95F, 0.85F, 0.10F},  // yellow
    {0.85F, 0.15F, 0.80F},  // magenta
    {0.10F, 0.85F, 0.85F},  // cyan
    {0.95F, 0.50F, 0.05F},  // orange
    {0.95F, 0.95F, 0.95F},  // white
}};

struct Palette {
    Rgb sky;
    Rgb ground;
};

constexpr std::array<Palette, kPaletteCount> kPalettes = {{
    {{0.55F, 0.75F, 0.95F}, {0.35F, 0.55F, 0.20F}},
    {{0.95F, 0.70F, 0.50F}, {0.50F, 0.35F, 0.20F}},
    {{0.30F, 0.30F, 0.45F}, {0.25F, 0.25F, 0.25F}},
    {{0.80F, 0.90F, 0.80F}, {0.60F, 0.50F, 0.35F}},
    {{0.90F, 0.85F, 0.60F}, {0.70F, 0.60F, 0.30F}},
    {{0.60F, 0.50F, 0.80F}, {0.30F, 0.20F, 0.40F}},
    {{0.50F, 0.80F, 0.80F}, {0.20F, 0.40F, 0.45F}},
    {{0.85F, 0.60F, 0.70F}, {0.45F, 0.25F, 0.30F}},
}};

constexpr std::array<float, kAngleCount> kHorizon = {0.60F, 0.50F, 0.70F, 0.55F};
constexpr std::array<float, kAngleCount> kStretch = {1.00F, 1.20F, 0.80F, 0.90F};
constexpr std::array<float, kZoomLevels> kZoom = {0.5F, 1.0F, 2.0F, 4.0F};
constexpr float kGroundShade = 0.75F;
constexpr int kSecondarySize = 0;

bool inside(const Subject& s, float stretch, double x, double y) {
    const double h = s.half_extent();
    const double dx = (x - s.center_x()) / h;
    const double dy = (y - s.center_y()) / (h * stretch);
    switch (s.shape) {
        case Shape::Circle: return dx * dx + dy * dy <= 1.0;
        case Shape::Square: return std::abs(dx) <= 0.85 && std::abs(dy) <= 0.85;
        case Shape::Triangle: return dy >= -1.0 && dy <= 1.0 && std::abs(dx) <= 0.5 * (dy + 1.0);
    }
    return false;
}

bool shaded_cell(int location, double x, double y) {
    const auto cell = [](double v) { return static_cast<long>(std::floor(v / 0.2)); };
    switch (location) {
        case 1: return (cell(x) & 1) != 0;
        case 2: return ((cell(x) + cell(y)) & 1) != 0;
        case 3: return (cell(x + y) & 1) != 0;
        default: return false;
    }
}

Rgb world_color(const Scene& s, double x, double y) {
    const Palette& pal = kPalettes[static_cast<std::size_t>(s.palette)];
    Rgb c = pal.sky;
    if (y >= kHorizon[static_cast<std::size_t>(s.camera.angle)]) {
        c = pal.ground;
        if (shaded_cell(s.location, x, y)) {
            for (float& v : c) v *= kGroundShade;
        }
    }
    const float stretch = kStretch[static_cast<std::size_t>(s.camera.angle)];
    if (s.secondary && inside(*s.secondary, stretch, x, y)) c = kSubjectColors[static_cast<std::size_t>(s.secondary->color)];
    if (inside(s.primary, stretch, x, y)) c = kSubjectColors[static_cast<std::size_t>(s.primary.color)];
    return c;
}

// The world square [-0.5, 1.5]^2 rasterized at twice the frame resolution, so
// one canvas pixel matches one frame pixel at zoom 1.
Tensor render_canvas(const Scene& s, std::size_t size) {
    const std::size_t n = 2 * size;
    const double px = 1.0 / static_cast<double>(size);
    Tensor canvas({n, n, 3});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            Rgb acc{0.0F, 0.0F, 0.0F};
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    const double x = -0.5 + (static_cast<double>(c) + 0.25 + 0.5 * sx) * px;
                    const double y = -0.5 + (static_cast<double>(r) + 0.25 + 0.5 * sy) * px;
                    const Rgb v = world_color(s, x, y);
                    for (int k = 0; k < 3; ++k) acc[k] += 0.25F * v[k];
                }
            }
            float* dst = canvas.data() + (r * n + c) * 3;
            for (int k = 0; k < 3; ++k) dst[k] = acc[k];
        }
    }
    return canvas;
}

void check_range(int v, int n, const char* what) {
    if (v < 0 || v >= n) {
        throw std::invalid_argument(std::string("scene: ") + what + " " + std::to_string(v) + " outside [0, " +
                                    std::to_string(n) + ")");
    }
}

void validate_subject(const Subject& s) {
    check_range(static_cast<int>(s.shape), kShapeCount, "shape");
    check_range(s.color, kColorCount, "color");
    check_range(s.gx, kGridSteps, "grid x");
    check_range(s.gy, kGridSteps, "grid y");
    check_range(s.size, kSizeLevels, "size");
}

nlohmann::json subject_json(const Subject& s) {
    return {{"shape", static_cast<int>(s.shape)}, {"color", s.color}, {"gx", s.gx}, {"gy", s.gy}, {"size", s.size}};
}

Subject subject_from_json(const nlohmann::json& j) {
    Subject s;
    s.shape = static_cast<Shape>(j.at("shape").get<int>());
    s.color = j.at("color").get<int>();
    s.gx = j.at("gx").get<int>();
    s.gy = j.at("gy").get<int>();
    s.size = j.at("size").get<int>();
    return s;
}

}  // namespace

std::string_view to_string(Shape s) noexcept {
    switch (s) {
        case Shape::Circle: return "circle";
        case Shape::Square: return "square";
        case Shape::Triangle: return "triangle";
    }
    return "?";
}

float Camera::zoom_factor() const noexcept { return kZoom[static_cast<std::size_t>(std::clamp(zoom, 0, 3))]; }

std::array<float, 2> Scene::camera_center() const noexcept {
    const float z = camera.zoom_factor();
    if (z <= 1.0F) return {0.5F, 0.5F};
    const float lo = 0.5F / z;
    const float hi = 1.0F - 0.5F / z;
    return {std::clamp(primary.center_x(), lo, hi), std::clamp(primary.center_y(), lo, hi)};
}

void Scene::validate() const {
    validate_subject(primary);
    if (secondary) validate_subject(*secondary);
    check_range(palette, kPaletteCount, "palette");
    check_range(location, kLocationCount, "location");
    check_range(camera.zoom, kZoomLevels, "zoom");
    check_range(camera.angle, kAngleCount, "angle");
    if (!(lighting >= 0.0F && lighting <= 1.0F)) throw std::invalid_argument("scene: lighting outside [0, 1]");
}

nlohmann::json Scene::to_json() const {
    nlohmann::json j{{"primary", subject_json(primary)},
                     {"palette", palette},
                     {"location", location},
                     {"lighting", lighting},
                     {"camera", {{"zoom", camera.zoom}, {"flip", camera.flip}, {"angle", camera.angle}}}};
    j["secondary"] = secondary ? subject_json(*secondary) : nlohmann::json(nullptr);
    return j;
}

Scene Scene::from_json(const nlohmann::json& j) {
    Scene s;
    s.primary = subject_from_json(j.at("primary"));
    if (j.contains("secondary") && !j.at("secondary").is_null()) s.secondary = subject_from_json(j.at("secondary"));
    s.palette = j.at("palette").get<int>();
    s.location = j.at("location").get<int>();
    s.lighting = j.at("lighting").get<float>();
    const auto& c = j.at("camera");
    s.camera.zoom = c.at("zoom").get<int>();
    s.camera.flip = c.at("flip").get<bool>();
    s.camera.angle = c.at("angle").get<int>();
    s.validate();
    return s;
}

Tensor render_scene(const Scene& scene, std::size_t size) {
    scene.validate();
    if (size == 0) throw std::invalid_argument("render_scene: size must be positive");
    const Tensor canvas = render_canvas(scene, size);
    const std::size_t cn = 2 * size;
    const double z = scene.camera.zoom_factor();
    const auto center = scene.camera_center();
    const double w = static_cast<double>(size);
    Tensor img({size, size, 3});
    auto sample = [&](double u, double v, int k) {
        const double maxc = static_cast<double>(cn - 1);
        u = std::clamp(u, 0.0, maxc);
        v = std::clamp(v, 0.0, maxc);
        const auto u0 = static_cast<std::size_t>(std::floor(u));
        const auto v0 = static_cast<std::size_t>(std::floor(v));
        const std::size_t u1 = std::min(u0 + 1, cn - 1);
        const std::size_t v1 = std::min(v0 + 1, cn - 1);
        const double fu = u - static_cast<double>(u0);
        const double fv = v - static_cast<double>(v0);
        auto at = [&](std::size_t r, std::size_t c) { return static_cast<double>(canvas[(r * cn + c) * 3 + k]); };
        return (1.0 - fv) * ((1.0 - fu) * at(v0, u0) + fu * at(v0, u1)) + fv * ((1.0 - fu) * at(v1, u0) + fu * at(v1, u1));
    };
    for (std::size_t i = 0; i < size; ++i) {
        const double y = center[1] - 0.5 / z + (static_cast<double>(i) + 0.5) / (z * w);
        const double v = (y + 0.5) * w - 0.5;
        for (std::size_t j = 0; j < size; ++j) {
            const double x = center[0] - 0.5 / z + (static_cast<double>(j) + 0.5) / (z * w);
            const double u = (x + 0.5) * w - 0.5;
            const std::size_t col = scene.camera.flip ? size - 1 - j : j;
            float* dst = img.data() + (i * size + col) * 3;
            for (int k = 0; k < 3; ++k) dst[k] = static_cast<float>(sample(u, v, k) * scene.lighting);
        }
    }
    return img;
}

std::vector<std::array<float, 3>> reference_colors() {
    std::vector<std::array<float, 3>> out(kSubjectColors.begin(), kSubjectColors.end());
    for (const Palette& p : kPalettes) {
        out.push_back(p.sky);
        out.push_back(p.ground);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Edits
// ---------------------------------------------------------------------------

std::string_view to_string(EditPattern p) noexcept {
    switch (p) {
        case EditPattern::ShotReverseShot: return "shot-reverse-shot";
        case EditPattern::CutIn: return "cut-in";
        case EditPattern::CutOut: return "cut-out";
        case EditPattern::Cutaway: return "cutaway";
        case EditPattern::MultiAngle: return "multi-angle";
    }
    return "?";
}

EditPattern parse_pattern(std::string_view s) {
    for (EditPattern p : kAllPatterns) {
        if (to_string(p) == s) return p;
    }
    throw std::invalid_argument("unknown edit pattern '" + std::string(s) + "'");
}

Scene apply_edit(const Scene& scene, EditPattern pattern) {
    scene.validate();
    Scene out = scene;
    switch (pattern) {
        case EditPattern::CutIn:
            if (scene.camera.zoom + 1 >= kZoomLevels) throw std::invalid_argument("cut-in: camera already at maximum zoom");
            ++out.camera.zoom;
            break;
        case EditPattern::CutOut:
            if (scene.camera.zoom == 0) throw std::invalid_argument("cut-out: camera already at minimum zoom");
            --out.camera.zoom;
            break;
        case EditPattern::ShotReverseShot: {
            if (!scene.secondary) throw std::invalid_argument("shot-reverse-shot: scene has no secondary subject");
            Subject& a = out.primary;
            Subject& b = *out.secondary;
            std::swap(a.shape, b.shape);
            std::swap(a.color, b.color);
            out.camera.flip = !out.camera.flip;
            break;
        }
        case EditPattern::Cutaway:
            out.primary.shape = static_cast<Shape>((static_cast<int>(scene.primary.shape) + 1) % kShapeCount);
            out.primary.color = (scene.primary.color + 3) % kColorCount;
            break;
        case EditPattern::MultiAngle:
            out.camera.angle = (scene.camera.angle + 1) % kAngleCount;
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<int, kRelationalLength> kRelSizes = {5, kPaletteCount, kLightingLevels, kLocationCount, 2, 3};
constexpr std::array<int, kIndividualLength> kIndSizes = {
    kShapeCount, kColorCount, kLocationCount, kPaletteCount,                    // summary
    kSizeLevels, 1 + kShapeCount * kColorCount, 1 + kGridSteps * kGridSteps,  // detail
    kZoomLevels, kGridSteps * kGridSteps, kAngleCount, 2};                      // cinematography

struct CodeTable {
    std::array<std::int32_t, kRelationalLength> rel{};
    std::array<std::int32_t, kIndividualLength> ind{};
    std::int32_t total = 0;
};

constexpr CodeTable make_table() {
    CodeTable t;
    std::int32_t next = 1;
    for (std::size_t i = 0; i < kRelationalLength; ++i) {
        t.rel[i] = next;
        next += kRelSizes[i];
    }
    for (std::size_t i = 0; i < kIndividualLength; ++i) {
        t.ind[i] = next;
        next += kIndSizes[i];
    }
    t.total = next;
    return t;
}

constexpr CodeTable kCodes = make_table();

int lighting_level(float l) { return static_cast<int>(std::lround(static_cast<double>(l) * 5.0)); }

int field_value(std::int32_t code, std::int32_t offset, int size, const char* what) {
    if (code < offset || code >= offset + size) {
        throw std::invalid_argument(std::string("unknown prompt code ") + std::to_string(code) + " for field " + what);
    }
    return code - offset;
}

}  // namespace

std::size_t prompt_vocab_size() noexcept { return static_cast<std::size_t>(kCodes.total); }

IndividualPrompt describe_shot(const Scene& s) {
    IndividualPrompt p;
    p.shape = s.primary.shape;
    p.color = s.primary.color;
    p.location = s.location;
    p.palette = s.palette;
    p.size = s.primary.size;
    if (s.secondary) {
        p.secondary = 1 + static_cast<int>(s.secondary->shape) * kColorCount + s.secondary->color;
        p.secondary_pos = 1 + s.secondary->gy * kGridSteps + s.secondary->gx;
    }
    p.zoom = s.camera.zoom;
    p.position = s.primary.gy * kGridSteps + s.primary.gx;
    p.angle = s.camera.angle;
    p.flip = s.camera.flip;
    return p;
}

HierarchicalPrompt describe_pair(const Scene& cond, const Scene& tgt, EditPattern pattern) {
    HierarchicalPrompt h;
    h.relational.pattern = pattern;
    h.relational.palette = cond.palette;
    h.relational.lighting = lighting_level(cond.lighting);
    h.relational.location = cond.location;
    h.relational.identity_kept = cond.primary.shape == tgt.primary.shape && cond.primary.color == tgt.primary.color;
    h.relational.zoom_relation = tgt.camera.zoom > cond.camera.zoom ? 1 : (tgt.camera.zoom < cond.camera.zoom ? 2 : 0);
    h.cond = describe_shot(cond);
    h.tgt = describe_shot(tgt);
    return h;
}

Scene decode_scene(const RelationalPrompt& rel, const IndividualPrompt& ind) {
    Scene s;
    s.primary.shape = ind.shape;
    s.primary.color = ind.color;
    s.primary.size = ind.size;
    s.primary.gx = ind.position % kGridSteps;
    s.primary.gy = ind.position / kGridSteps;
    if (ind.secondary > 0) {
        Subject b;
        b.shape = static_cast<Shape>((ind.secondary - 1) / kColorCount);
        b.color = (ind.secondary - 1) % kColorCount;
        b.size = kSecondarySize;
        const int pos = ind.secondary_pos > 0 ? ind.secondary_pos - 1 : 0;
        b.gx = pos % kGridSteps;
        b.gy = pos / kGridSteps;
        s.secondary = b;
    }
    s.palette = ind.palette;
    s.location = ind.location;
    s.lighting = static_cast<float>(rel.lighting) / 5.0F;
    s.camera.zoom = ind.zoom;
    s.camera.angle = ind.angle;
    s.camera.flip = ind.flip;
    return s;
}

std::vector<std::int32_t> relational_codes(const RelationalPrompt& p) {
    const std::array<int, kRelationalLength> v = {static_cast<int>(p.pattern), p.palette, p.lighting, p.location,
                                                  p.identity_kept ? 1 : 0, p.zoom_relation};
    std::vector<std::int32_t> out(kRelationalLength);
    for (std::size_t i = 0; i < kRelationalLength; ++i) {
        if (v[i] < 0 || v[i] >= kRelSizes[i]) throw std::invalid_argument("relational prompt field out of range");
        out[i] = kCodes.rel[i] + v[i];
    }
    return out;
}

std::vector<std::int32_t> individual_codes(const IndividualPrompt& p) {
    const std::array<int, kIndividualLength> v = {static_cast<int>(p.shape), p.color, p.location, p.palette,
                                                  p.size, p.secondary, p.secondary_pos, p.zoom,
                                                  p.position, p.angle, p.flip ? 1 : 0};
    std::vector<std::int32_t> out(kIndividualLength);
    for (std::size_t i = 0; i < kIndividualLength; ++i) {
        if (v[i] < 0 || v[i] >= kIndSizes[i]) throw std::invalid_argument("individual prompt field out of range");
        out[i] = kCodes.ind[i] + v[i];
    }
    return out;
}

RelationalPrompt decode_relational(std::span<const std::int32_t> c) {
    if (c.size() < kRelationalLength) throw std::invalid_argument("relational prompt too short");
    RelationalPrompt p;
    p.pattern = static_cast<EditPattern>(field_value(c[0], kCodes.rel[0], kRelSizes[0], "pattern"));
    p.palette = field_value(c[1], kCodes.rel[1], kRelSizes[1], "palette");
    p.lighting = field_value(c[2], kCodes.rel[2], kRelSizes[2], "lighting");
    p.location = field_value(c[3], kCodes.rel[3], kRelSizes[3], "location");
    p.identity_kept = field_value(c[4], kCodes.rel[4], kRelSizes[4], "identity") != 0;
    p.zoom_relation = field_value(c[5], kCodes.rel[5], kRelSizes[5], "zoom relation");
    return p;
}

IndividualPrompt decode_individual(std::span<const std::int32_t> c) {
    if (c.size() < kIndividualLength) throw std::invalid_argument("individual prompt too short");
    IndividualPrompt p;
    static constexpr const char* kNames[] = {"shape", "color", "location", "palette", "size", "secondary",
                                             "secondary position", "zoom", "position", "angle", "flip"};
    std::array<int, kIndividualLength> v{};
    const IndividualPrompt defaults;
    const std::array<int, kIndividualLength> dv = {static_cast<int>(defaults.shape), defaults.color,
                                                   defaults.location, defaults.palette, defaults.size,
                                                   defaults.secondary, defaults.secondary_pos, defaults.zoom,
                                                   defaults.position, defaults.angle, defaults.flip ? 1 : 0};
    for (std::size_t i = 0; i < kIndividualLength; ++i) {
        v[i] = c[i] == kPadCode ? dv[i] : field_value(c[i], kCodes.ind[i], kIndSizes[i], kNames[i]);
    }
    p.shape = static_cast<Shape>(v[0]);
    p.color = v[1];
    p.location = v[2];
    p.palette = v[3];
    p.size = v[4];
    p.secondary = v[5];
    p.secondary_pos = v[6];
    p.zoom = v[7];
    p.position = v[8];
    p.angle = v[9];
    p.flip = v[10] != 0;
    return p;
}

PromptCodes encode_prompt(const HierarchicalPrompt& prompt, float dropout, Rng& rng, bool training,
                          std::size_t rel_len, std::size_t ind_len) {
    if (!(dropout >= 0.0F && dropout <= 1.0F)) throw std::invalid_argument("prompt dropout must lie in [0, 1]");
    if (rel_len < kRelationalLength || ind_len < kIndividualLength) {
        throw std::invalid_argument("prompt segment lengths are shorter than the prompt schema");
    }
    PromptCodes out;
    out.rel = relational_codes(prompt.relational);
    out.ind_cond = individual_codes(prompt.cond);
    out.ind_tgt = individual_codes(prompt.tgt);
    if (training) {
        for (auto* codes : {&out.ind_cond, &out.ind_tgt}) {
            for (std::size_t f : kDroppableFields) {
                if (rng.bernoulli(dropout)) (*codes)[f] = kPadCode;
            }
        }
    }
    out.rel.resize(rel_len, kPadCode);
    out.ind_cond.resize(ind_len, kPadCode);
    out.ind_tgt.resize(ind_len, kPadCode);
    return out;
}

PromptEmbeddings embed_prompt(const PromptCodes& codes, const Tensor& table) {
    const std::size_t d = table.cols();
    auto lookup = [&](const std::vector<std::int32_t>& c) {
        Tensor e = Tensor::matrix(c.size(), d);
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (c[i] < 0 || static_cast<std::size_t>(c[i]) >= table.rows()) {
                throw std::invalid_argument("unknown prompt code " + std::to_string(c[i]));
            }
            std::copy_n(table.row(static_cast<std::size_t>(c[i])).data(), d, e.row(i).data());
        }
        return e;
    };
    return {lookup(codes.rel), lookup(codes.ind_cond), lookup(codes.ind_tgt)};
}

// ---------------------------------------------------------------------------
// Pairs and datasets
// ---------------------------------------------------------------------------

Scene sample_scene(Rng& rng, EditPattern pattern) {
    auto pick = [&](int n) { return static_cast<int>(rng.below(static_cast<std::uint64_t>(n))); };
    Scene s;
    s.primary.shape = static_cast<Shape>(pick(kShapeCount));
    s.primary.color = pick(kColorCount);
    s.primary.gx = pick(kGridSteps);
    s.primary.gy = pick(kGridSteps);
    s.primary.size = pick(kSizeLevels);
    const bool with_secondary = pattern == EditPattern::ShotReverseShot || rng.bernoulli(0.5);
    if (with_secondary) {
        Subject b;
        b.shape = static_cast<Shape>(pick(kShapeCount));
        b.color = pick(kColorCount);
        int cell = pick(kGridSteps * kGridSteps - 1);
        if (cell >= s.primary.gy * kGridSteps + s.primary.gx) ++cell;
        b.gx = cell % kGridSteps;
        b.gy = cell / kGridSteps;
        b.size = kSecondarySize;
        s.secondary = b;
    }
    s.palette = pick(kPaletteCount);
    s.location = pick(kLocationCount);
    s.lighting = static_cast<float>(1 + pick(5)) / 5.0F;
    s.camera.angle = pick(kAngleCount);
    s.camera.flip = rng.bernoulli(0.5);
    s.camera.zoom = pattern == EditPattern::CutIn ? 1 : 1 + pick(2);
    return s;
}

ShotPair make_pair(std::uint64_t seed, EditPattern pattern, std::size_t image_size) {
    Rng rng(seed);
    ShotPair p;
    p.seed = seed;
    p.pattern = pattern;
    p.cond_scene = sample_scene(rng, pattern);
    p.tgt_scene = apply_edit(p.cond_scene, pattern);
    p.prompt = describe_pair(p.cond_scene, p.tgt_scene, pattern);
    p.cond = render_scene(p.cond_scene, image_size);
    p.tgt = render_scene(p.tgt_scene, image_size);
    return p;
}

PatternMix parse_mix(std::string_view s) {
    PatternMix mix{};
    if (s == "uniform") {
        mix.fill(1.0 / static_cast<double>(kPatternCount));
        return mix;
    }
    while (!s.empty()) {
        const auto comma = s.find(',');
        const std::string_view item = s.substr(0, comma);
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) throw std::invalid_argument("pattern mix entry '" + std::string(item) + "' lacks '='");
        const EditPattern p = parse_pattern(item.substr(0, eq));
        const std::string value(item.substr(eq + 1));
        std::size_t used = 0;
        double w = 0.0;
        try {
            w = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != value.size() || value.empty()) throw std::invalid_argument("bad pattern weight '" + value + "'");
        mix[static_cast<std::size_t>(p)] += w;
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    validate_mix(mix);
    return mix;
}

void validate_mix(const PatternMix& mix) {
    double sum = 0.0;
    for (double w : mix) {
        if (!(w >= 0.0)) throw std::invalid_argument("pattern mix weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6g", sum);
        throw std::invalid_argument(std::string("pattern mix sums to ") + buf + ", expected 1");
    }
}

std::array<std::size_t, kPatternCount> mix_counts(const PatternMix& mix, std::size_t n) {
    validate_mix(mix);
    std::array<std::size_t, kPatternCount> counts{};
    std::array<double, kPatternCount> frac{};
    std::size_t used = 0;
    for (std::size_t i = 0; i < kPatternCount; ++i) {
        const double exact = mix[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        frac[i] = exact - static_cast<double>(counts[i]);
        used += counts[i];
    }
    std::array<std::size_t, kPatternCount> order{};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; used < n; ++k, ++used) {
        const std::size_t i = order[k % kPatternCount];
        if (mix[i] > 0.0) {
            ++counts[i];
        } else {
            --used;
        }
    }
    return counts;
}

std::uint64_t pair_seed(const DatasetSpec& spec, std::size_t index) {
    if (spec.split != "train" && spec.split != "heldout") {
        throw std::invalid_argument("dataset split must be 'train' or 'heldout', got '" + spec.split + "'");
    }
    const std::uint64_t s = mix64(spec.seed ^ mix64(static_cast<std::uint64_t>(index) + 1)) >> 1;
    return spec.split == "heldout" ? s | (1ULL << 63) : s;
}

std::vector<ShotPair> generate_dataset(const DatasetSpec& spec) {
    if (spec.count == 0) throw std::invalid_argument("dataset size must be >= 1");
    const auto counts = mix_counts(spec.mix, spec.count);
    std::vector<EditPattern> patterns;
    patterns.reserve(spec.count);
    for (std::size_t i = 0; i < kPatternCount; ++i) patterns.insert(patterns.end(), counts[i], kAllPatterns[i]);
    Rng order = Rng(spec.seed).split("order");
    for (std::size_t i = patterns.size(); i > 1; --i) std::swap(patterns[i - 1], patterns[order.below(i)]);

    std::vector<ShotPair> pairs;
    pairs.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        ShotPair p = make_pair(pair_seed(spec, i), patterns[i], spec.image_size);
        p.id = i;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<ShotPair> curate(const std::vector<ShotPair>& pairs, const CurationCriteria& criteria) {
    std::vector<ShotPair> kept;
    for (const ShotPair& p : pairs) {
        if (criteria.min_lighting && !(p.cond_scene.lighting > *criteria.min_lighting)) continue;
        if (criteria.require_secondary && !p.cond_scene.secondary) continue;
        if (criteria.accept && !criteria.accept(p)) continue;
        kept.push_back(p);
    }
    if (criteria.balance_patterns && !kept.empty()) {
        std::array<std::size_t, kPatternCount> counts{};
        for (const ShotPair& p : kept) ++counts[static_cast<std::size_t>(p.pattern)];
        std::size_t m = kept.size();
        for (std::size_t c : counts) {
            if (c > 0) m = std::min(m, c);
        }
        std::array<std::size_t, kPatternCount> taken{};
        std::vector<ShotPair> balanced;
        for (ShotPair& p : kept) {
            auto& t = taken[static_cast<std::size_t>(p.pattern)];
            if (t < m) {
                ++t;
                balanced.push_back(std::move(p));
            }
        }
        kept = std::move(balanced);
    }
    if (kept.empty()) std::clog << "warning: curation criteria rejected every pair\n";
    for (ShotPair& p : kept) p.curated = true;
    return kept;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

nlohmann::json pair_record(const ShotPair& pair, const std::string& cond_path, const std::string& tgt_path) {
    Rng unused(0);
    const PromptCodes codes = encode_prompt(pair.prompt, 0.0F, unused, false);
    return {{"id", pair.id},
            {"seed", pair.seed},
            {"pattern", std::string(to_string(pair.pattern))},
            {"cond_scene", pair.cond_scene.to_json()},
            {"tgt_scene", pair.tgt_scene.to_json()},
            {"prompt", {{"rel", codes.rel}, {"ind_cond", codes.ind_cond}, {"ind_tgt", codes.ind_tgt}}},
            {"curated", pair.curated},
            {"cond", cond_path},
            {"tgt", tgt_path}};
}

void write_manifest(const std::filesystem::path& dir, const std::vector<ShotPair>& pairs,
                    const nlohmann::json& provenance) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream os(dir / "manifest.jsonl", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (const ShotPair& p : pairs) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "%06llu", static_cast<unsigned long long>(p.id));
        const std::string cond = std::string("images/") + stem + "_cond.nst";
        const std::string tgt = std::string("images/") + stem + "_tgt.nst";
        save_tensor(dir / cond, p.cond);
        save_tensor(dir / tgt, p.tgt);
        os << pair_record(p, cond, tgt).dump() << '\n';
    }
    std::ofstream ps(dir / "provenance.json", std::ios::binary);
    ps << provenance.dump(2) << '\n';
    if (!os || !ps) throw std::runtime_error("failed writing manifest in " + dir.string());
}

std::vector<ShotPair> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw std::runtime_error("cannot open manifest " + manifest.string());
    const auto dir = manifest.parent_path();
    std::vector<ShotPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ShotPair p;
            p.id = j.at("id").get<std::uint64_t>();
            p.seed = j.at("seed").get<std::uint64_t>();
            p.pattern = parse_pattern(j.at("pattern").get<std::string>());
            p.cond_scene = Scene::from_json(j.at("cond_scene"));
            p.tgt_scene = Scene::from_json(j.at("tgt_scene"));
            const auto& pr = j.at("prompt");
            const auto rel = pr.at("rel").get<std::vector<std::int32_t>>();
            const auto ic = pr.at("ind_cond").get<std::vector<std::int32_t>>();
            const auto it = pr.at("ind_tgt").get<std::vector<std::int32_t>>();
            p.prompt.relational = decode_relational(rel);
            p.prompt.cond = decode_individual(ic);
            p.prompt.tgt = decode_individual(it);
            p.curated = j.value("curated", false);
            p.cond = load_tensor(dir / j.at("cond").get<std::string>());
            p.tgt = load_tensor(dir / j.at("tgt").get<std::string>());
            pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            throw std::runtime_error(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return pairs;
}

nlohmann::json read_provenance(const std::filesystem::path& manifest) {
    const auto path = manifest.parent_path() / "provenance.json";
    std::ifstream is(path);
    if (!is) return nlohmann::json::object();
    return nlohmann::json::parse(is);
}

// ---------------------------------------------------------------------------
// Latents
// ---------------------------------------------------------------------------

Tensor encode_latent(const Tensor& image, std::size_t patch) {
    Tensor scaled = image;
    for (float& v : scaled.values()) v = 2.0F * v - 1.0F;
    return patchify(scaled, patch);
}

Tensor decode_latent(const Tensor& latent, std::size_t image_size, std::size_t patch) {
    Tensor img = unpatchify(latent, image_size, image_size, patch);
    for (float& v : img.values()) v = std::clamp((v + 1.0F) * 0.5F, 0.0F, 1.0F);
    return img;
}

}  // namespace nextshot
