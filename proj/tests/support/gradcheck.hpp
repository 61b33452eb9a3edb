// SPDX-License-Identifier: Apache-2.0
// Finite-difference check of every trainable tensor of a model.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nextshot/caci.hpp"
#include "nextshot/kernels.hpp"
#include "nextshot/model.hpp"
#include "nextshot/rng.hpp"

namespace testsupport {

struct TensorGradCheck {
    std::string name;
    double rel_error = 0.0;  // ||g - fd|| / ||fd||
    double fd_norm = 0.0;
};

/// Moves every trainable tensor off its zero / AdaLN-Zero initialization so
/// that each one receives a nonzero gradient.
inline void perturb_trainables(nextshot::Model& model, std::uint64_t seed) {
    const nextshot::Rng root(seed);
    auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps.trainable(i)) continue;
        nextshot::Rng r = root.split(ps.name(i));
        const float sd = ps.name(i).find("lora_b") != std::string::npos ? 0.3F : 0.05F;
        for (float& v : ps[i].values()) v += sd * static_cast<float>(r.normal());
    }
}

/// Loss 0.5 * sum(w * out^2) over the whole output with fixed random weights,
/// on a batch of two samples with random codes, latents and t.
inline std::vector<TensorGradCheck> gradcheck_model(const nextshot::ModelConfig& cfg, std::uint64_t seed,
                                                    nextshot::ConditioningMode mode, float eps = 1e-2F) {
    using namespace nextshot;
    Model model(cfg, seed);
    perturb_trainables(model, seed + 1);
    Rng r(seed + 2);
    const std::size_t bsz = 2, p = cfg.tokens_per_image(), l = cfg.latent_width();
    ModelBatch batch;
    const auto code = [&] { return static_cast<std::int32_t>(r.below(cfg.vocab)); };
    for (std::size_t b = 0; b < bsz; ++b) {
        PromptCodes pc;
        if (cfg.with_rel) {
            for (std::size_t i = 0; i < cfg.len_rel; ++i) pc.rel.push_back(code());
        }
        for (std::size_t i = 0; i < cfg.len_ind; ++i) {
            pc.ind_cond.push_back(code());
            pc.ind_tgt.push_back(code());
        }
        batch.prompts.push_back(pc);
        batch.t.push_back(static_cast<float>(r.uniform_open()));
    }
    batch.z_cond = Tensor::matrix(bsz * p, l);
    batch.z_t = Tensor::matrix(bsz * p, l);
    r.fill_normal(batch.z_cond);
    r.fill_normal(batch.z_t);
    const CaciPlan plan = caci_plan(mode);
    Tensor weights = Tensor::matrix(bsz * model.layout().total(), l);
    r.fill_normal(weights);

    const auto loss = [&](const Model& m) {
        const Tensor out = m.forward(batch, plan);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += 0.5 * weights[i] * out[i] * out[i];
        return s;
    };
    ForwardState state;
    const Tensor out = model.forward(batch, plan, &state);
    Tensor d_out = out;
    for (std::size_t i = 0; i < d_out.size(); ++i) d_out[i] = weights[i] * out[i];
    const Gradients grads = model.backward(batch, state, d_out);

    std::vector<TensorGradCheck> results;
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        if (!model.params().trainable(i)) continue;
        Model probe = model;
        const Tensor fd = finite_diff_grad(
            [&](const Tensor& x) {
                probe.params()[i] = x;
                return loss(probe);
            },
            model.params()[i], eps);
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < fd.size(); ++k) {
            const double diff = static_cast<double>(fd[k]) - grads[i][k];
            num += diff * diff;
            den += static_cast<double>(fd[k]) * fd[k];
        }
        results.push_back({model.params().name(i), den > 0.0 ? std::sqrt(num / den) : std::sqrt(num),
                           std::sqrt(den)});
    }
    return results;
}

}  // namespace testsupport
