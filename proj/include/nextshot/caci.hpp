// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "nextshot/layout.hpp"
#include "nextshot/tensor.hpp"

namespace nextshot {

enum class TimestepSource : std::uint8_t { Zero, Diffusion };

/// Which per-segment conditioning scheme drives AdaLN.
enum class ConditioningMode : std::uint8_t {
    Caci,              // clean segments at t = 0, target side at the diffusion t
    SyncCond,          // every segment at the diffusion t
    CaciRelDiffusion,  // Caci, but Rel follows the diffusion t
};

std::string_view to_string(ConditioningMode m) noexcept;
/// Accepts the CLI spellings "caci", "synccond", "caci-rel-t".
ConditioningMode parse_conditioning(std::string_view s);

struct SegmentConditioning {
    TimestepSource timestep = TimestepSource::Zero;
    SegmentKind context = SegmentKind::Rel;  // whose pooled prompt feeds AdaLN
};

struct CaciPlan {
    ConditioningMode mode = ConditioningMode::Caci;
    std::array<SegmentConditioning, kSegmentCount> entries{};

    const SegmentConditioning& at(SegmentKind k) const noexcept { return entries[index_of(k)]; }
    /// The t a segment actually sees: 0 for Zero sources, `t` otherwise.
    float resolve_t(SegmentKind k, float t) const noexcept {
        return at(k).timestep == TimestepSource::Zero ? 0.0F : t;
    }
};

CaciPlan caci_plan(ConditioningMode mode) noexcept;

/// Sinusoidal features of 1000 * t: dim/2 sines followed by dim/2 cosines.
Tensor timestep_embedding(float t, std::size_t dim);

/// Mean-pooled prompt embeddings indexed by SegmentKind; only text segments are set.
using PooledPrompts = std::array<std::optional<Tensor>, kSegmentCount>;

Tensor pool_prompt(const Tensor& tokens);

/// Shared conditioning MLP: c = W2 silu(W1 u + b1) + b2. Hidden and output width equal d.
struct ConditionerWeights {
    const Tensor& w1;  // d x d
    const Tensor& b1;  // d
    const Tensor& w2;  // d x d
    const Tensor& b2;  // d
};

/// Per-block AdaLN projection of silu(c) to [shift, scale, gate] x {attention, MLP}.
struct ModulationWeights {
    const Tensor& w;  // 6d x d
    const Tensor& b;  // 6d
};

struct ModulationEntry {
    Tensor shift_attn, scale_attn, gate_attn;
    Tensor shift_mlp, scale_mlp, gate_mlp;
};

/// Row vector u = timestep_embedding(resolved t) + pooled[context source].
Tensor conditioning_input(const CaciPlan& plan, SegmentKind seg, float t, const PooledPrompts& pooled);

/// Intermediate activations kept for the backward pass.
struct ConditionerCache {
    Tensor u, h1, a1, c;
};

/// Rows of u -> rows of silu(c).
Tensor conditioner_forward(const Tensor& u, const ConditionerWeights& w, ConditionerCache* cache = nullptr);

/// silu(c) rows -> modulation rows (sc * w^T + b).
Tensor modulation_rows(const Tensor& sc, const Tensor& w, const Tensor& b);

ModulationEntry split_modulation(std::span<const float> row);

ModulationEntry modulation_for(const CaciPlan& plan, SegmentKind seg, float t, const PooledPrompts& pooled,
                               const ConditionerWeights& conditioner, const ModulationWeights& modulation);

float silu(float x) noexcept;
float silu_grad(float x) noexcept;

}  // namespace nextshot
