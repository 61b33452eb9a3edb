// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nextshot/caci.hpp"
#include "nextshot/model.hpp"
#include "nextshot/rng.hpp"
#include "nextshot/tensor.hpp"
#include "nextshot/world.hpp"

namespace nextshot {

// ---------------------------------------------------------------------------
// Rectified-flow noising and the target-masked objective
// ---------------------------------------------------------------------------

struct NoisingState {
    Tensor z_t;
    Tensor eps;
};

/// z_t = (1 - t) z0 + t eps with eps ~ N(0, 1) drawn from `rng`.
NoisingState noise_target(const Tensor& z0, float t, Rng& rng);

/// Mean squared error between the VisTgt rows of `output` ((B * n) x L) and
/// `target` ((B * P) x L). Rows outside VisTgt never enter the sum; when
/// `d_output` is given it receives dLoss/dOutput with exact zeros there.
double masked_velocity_loss(const Tensor& output, const Tensor& target, const SegmentLayout& layout,
                            std::size_t batch, Tensor* d_output = nullptr);

struct TrainingBatch {
    ModelBatch batch;
    Tensor target;  // (B * P) x L velocity eps - z0
};

/// Clean latents of one pair, computed once per dataset.
struct PairLatents {
    const ShotPair* pair = nullptr;
    Tensor z_cond;
    Tensor z_tgt;
};
std::vector<PairLatents> encode_pairs(const std::vector<ShotPair>& pairs, std::size_t patch);

/// Draws t uniform on (0, 1), noise and prompt dropout for each pair.
TrainingBatch make_training_batch(const ModelConfig& config, std::span<const PairLatents* const> items,
                                  float dropout, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam without weight decay; frozen parameters are never touched.
class Adam {
public:
    Adam(const ParamStore& params, AdamConfig config);
    void step(ParamStore& params, const Gradients& grads);
    std::size_t steps() const noexcept { return steps_; }

private:
    AdamConfig config_;
    std::size_t steps_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Two-stage training
// ---------------------------------------------------------------------------

enum class StageMode : std::uint8_t { TwoStage, RawOnly, CuratedOnly };
std::string_view to_string(StageMode m) noexcept;
/// Accepts "two-stage", "raw-only", "curated-only".
StageMode parse_stage(std::string_view s);

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch = 16;
    std::size_t broad_passes = 2;   // passes over the broad set
    std::size_t broad_steps = 0;    // overrides broad_passes when > 0
    std::size_t curated_steps = 500;
    ConditioningMode conditioning = ConditioningMode::Caci;
    StageMode stage = StageMode::TwoStage;
    float dropout = 0.2F;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    /// Step counts of the broad and curated stages for the given set sizes.
    std::pair<std::size_t, std::size_t> stage_steps(std::size_t broad_size, std::size_t curated_size) const;
};

struct LossRecord {
    std::size_t step = 0;  // 1-based, counted across stages
    std::string stage;     // "broad" or "curated"
    double loss = 0.0;
};

/// Called after every optimizer step with the batch that produced it.
using TrainObserver = std::function<void(const LossRecord&, const ModelBatch&)>;

/// Trains `model` in place. Batches walk a fresh seeded permutation of the
/// stage dataset every pass. Non-finite losses abort with a diagnostic.
std::vector<LossRecord> train_two_stage(Model& model, const std::vector<ShotPair>& broad,
                                        const std::vector<ShotPair>& curated, const TrainConfig& config,
                                        const TrainObserver& observer = {});

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> records);
double mean_loss(std::span<const LossRecord> records, std::size_t first_step, std::size_t last_step);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleStep {
    std::size_t step = 0;  // 0-based
    float t = 1.0F;
    const ModelBatch* batch = nullptr;  // exactly what the model sees this step
};
using SampleObserver = std::function<void(const SampleStep&)>;

struct SampleRequest {
    const Tensor* cond = nullptr;  // image
    const HierarchicalPrompt* prompt = nullptr;
};

/// Euler integration of the predicted velocity from t = 1 to t = 0 over the
/// target latents; the condition latents are fed unchanged at every step.
/// Sample i draws its initial noise from `rng.split(i)`.
std::vector<Tensor> sample_next_shots(const Model& model, std::span<const SampleRequest> requests,
                                      std::size_t steps, const CaciPlan& plan, const Rng& rng,
                                      const SampleObserver& observer = {});

Tensor sample_next_shot(const Model& model, const Tensor& cond, const HierarchicalPrompt& prompt, std::size_t steps,
                        const CaciPlan& plan, const Rng& rng, const SampleObserver& observer = {});

/// Per-pixel mean squared error between two images of equal shape.
double image_mse(const Tensor& a, const Tensor& b);

}  // namespace nextshot
