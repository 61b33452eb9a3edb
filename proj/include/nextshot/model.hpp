// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nextshot/caci.hpp"
#include "nextshot/kernels.hpp"
#include "nextshot/layout.hpp"
#include "nextshot/tensor.hpp"

namespace nextshot {

// ---------------------------------------------------------------------------
// Patch latents
// ---------------------------------------------------------------------------

/// [h x w x 3] image -> [(h/p * w/p) x 3p^2] tokens, patches in row-major grid
/// order, each patch flattened as (row, col, channel).
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t patch);

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

struct LoraAdapter {
    Tensor a;  // r x d_in
    Tensor b;  // d_out x r
    float alpha = 1.0F;

    std::size_t rank() const { return a.rows(); }
    float scale() const { return alpha / static_cast<float>(rank()); }
};

/// y = W x + (alpha / r) B (A x) for a single vector x.
Tensor lora_apply(const Tensor& w, const LoraAdapter& adapter, const Tensor& x);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Projection : std::uint8_t { PatchIn, Qkv, AttnOut, MlpIn, MlpOut, OutProj };
inline constexpr std::size_t kProjectionCount = 6;
std::string_view to_string(Projection p) noexcept;

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch = 4;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t blocks = 6;
    std::size_t mlp_ratio = 4;
    std::size_t lora_rank = 8;
    float lora_alpha = 16.0F;
    std::size_t len_rel = 6;
    std::size_t len_ind = 11;
    std::size_t vocab = 0;
    bool with_rel = true;
    bool train_adaln = true;
    bool train_embeddings = true;
    std::array<bool, kProjectionCount> adapted = {true, true, true, true, true, true};

    std::size_t latent_width() const { return 3 * patch * patch; }
    std::size_t tokens_per_image() const { return (image_size / patch) * (image_size / patch); }
    std::size_t mlp_hidden() const { return mlp_ratio * width; }
    SegmentLayout layout() const;
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    /// 32x32 images, patch 4, d=128, 4 heads, 6 blocks, r=8, alpha=16.
    static ModelConfig desk(std::size_t vocab);
    /// 16x16 images, d=16, 2 heads, 2 blocks, r=4, alpha=8; small enough for
    /// finite-difference checks and many seeded training runs.
    static ModelConfig tiny(std::size_t vocab);
    /// 16x16 images, d=64, 4 heads, 2 blocks, r=16, alpha=32; the smallest
    /// preset that learns an edit to near ground truth within minutes.
    static ModelConfig small(std::size_t vocab);
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline constexpr std::size_t kNoSlot = static_cast<std::size_t>(-1);

/// Ordered named tensors with a trainable flag each.
class ParamStore {
public:
    std::size_t add(std::string name, Tensor value, bool trainable);
    std::size_t size() const noexcept { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    bool trainable(std::size_t i) const { return trainable_.at(i); }
    Tensor& operator[](std::size_t i) { return values_.at(i); }
    const Tensor& operator[](std::size_t i) const { return values_.at(i); }
    std::size_t find(std::string_view name) const;  // kNoSlot when absent
    std::size_t trainable_count() const noexcept;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::vector<bool> trainable_;
};

/// Gradients aligned with a ParamStore; frozen entries stay empty.
using Gradients = std::vector<Tensor>;

struct LinearSlot {
    std::size_t base = kNoSlot;  // d_out x d_in, frozen
    std::size_t lora_a = kNoSlot;
    std::size_t lora_b = kNoSlot;
    bool adapted() const noexcept { return lora_a != kNoSlot; }
};

struct BlockSlots {
    LinearSlot qkv, attn_out, mlp_in, mlp_out;
    std::size_t mod_w = kNoSlot;  // 6d x d
    std::size_t mod_b = kNoSlot;  // 6d
};

// ---------------------------------------------------------------------------
// Block-level API
// ---------------------------------------------------------------------------

/// Linear layer view: y = x W^T + scale (x A^T) B^T.
struct LinearRef {
    const Tensor* w = nullptr;
    const Tensor* a = nullptr;
    const Tensor* b = nullptr;
    float scale = 0.0F;
};

struct BlockWeightsView {
    LinearRef qkv, attn_out, mlp_in, mlp_out;
    std::size_t heads = 1;
};

/// Modulation per segment; absent segments must be absent from the layout too.
using ModulationSet = std::array<std::optional<ModulationEntry>, kSegmentCount>;

/// One DiT block over a single sequence: x + gate * Attn(mod(x)), then
/// x + gate * MLP(mod(x)), with scale/shift/gate rows chosen by segment.
Tensor block_forward(const Tensor& x, const SegmentLayout& layout, const Tensor& mask, const ModulationSet& mods,
                     const BlockWeightsView& weights);

float gelu(float x) noexcept;
float gelu_grad(float x) noexcept;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Prompt codes of one sample, each already padded to its segment length.
struct PromptCodes {
    std::vector<std::int32_t> rel;
    std::vector<std::int32_t> ind_cond;
    std::vector<std::int32_t> ind_tgt;
};

struct ModelBatch {
    std::vector<PromptCodes> prompts;  // B entries
    Tensor z_cond;                     // (B * P) x L, clean latents
    Tensor z_t;                        // (B * P) x L, noised target latents
    std::vector<float> t;              // B entries

    std::size_t size() const noexcept { return t.size(); }
};

struct ForwardCache;  // defined in model.cpp

/// Owns the cache produced by Model::forward for a later backward pass.
class ForwardState {
public:
    ForwardState();
    ~ForwardState();
    ForwardState(ForwardState&&) noexcept;
    ForwardState& operator=(ForwardState&&) noexcept;

    ForwardCache* get() const noexcept { return cache_.get(); }

private:
    std::unique_ptr<ForwardCache> cache_;
};

class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const SegmentLayout& layout() const noexcept { return layout_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    std::size_t prompt_table() const noexcept { return prompt_table_; }
    std::size_t pos_table() const noexcept { return pos_table_; }
    const LinearSlot& patch_in() const noexcept { return patch_in_; }
    const LinearSlot& out_proj() const noexcept { return out_proj_; }
    const std::vector<BlockSlots>& blocks() const noexcept { return blocks_; }
    std::array<std::size_t, 4> conditioner_slots() const noexcept { return {cond_w1_, cond_b1_, cond_w2_, cond_b2_}; }
    std::array<std::size_t, 2> final_mod_slots() const noexcept { return {final_w_, final_b_}; }

    /// Embeds a single sample (no positional table) into a model input.
    ModelInput embed(const PromptCodes& prompts, const Tensor& z_cond, const Tensor& z_t, float t) const;

    /// Full-sequence velocity prediction for one embedded input; rows follow
    /// the layout, only the VisTgt rows are meaningful targets.
    Tensor model_forward(const ModelInput& input, const CaciPlan& plan) const;

    /// Batched forward from codes and latents: (B * n) x L output.
    Tensor forward(const ModelBatch& batch, const CaciPlan& plan, ForwardState* state = nullptr) const;

    /// Backpropagates dL/d(output) to every trainable parameter.
    Gradients backward(const ModelBatch& batch, const ForwardState& state, const Tensor& d_output) const;

    /// Per-segment modulation of one block for a sample, through the same
    /// path forward() uses.
    ModulationEntry modulation(std::size_t block, const CaciPlan& plan, SegmentKind seg, float t,
                               const PooledPrompts& pooled) const;
    PooledPrompts pooled_prompts(const ModelInput& input) const;

    BlockWeightsView block_weights(std::size_t block) const;
    LinearRef linear(const LinearSlot& slot) const;

private:
    void init_params(std::uint64_t seed);
    Tensor run(const Tensor& x0, const std::vector<float>& t, std::size_t batch, const CaciPlan& plan,
               ForwardCache* cache) const;

    ModelConfig config_;
    SegmentLayout layout_;
    ParamStore params_;
    std::size_t prompt_table_ = kNoSlot;
    std::size_t pos_table_ = kNoSlot;
    LinearSlot patch_in_;
    LinearSlot out_proj_;
    std::size_t cond_w1_ = kNoSlot, cond_b1_ = kNoSlot, cond_w2_ = kNoSlot, cond_b2_ = kNoSlot;
    std::size_t final_w_ = kNoSlot, final_b_ = kNoSlot;
    std::vector<BlockSlots> blocks_;
};

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u64 JSON header length, JSON header (config and
// record names), then one tensor record per parameter in store order.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace nextshot
