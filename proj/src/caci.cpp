// SPDX-License-Identifier: Apache-2.0
#include "nextshot/caci.hpp"

#include <cmath>
#include <stdexcept>

#include "nextshot/kernels.hpp"

namespace nextshot {

std::string_view to_string(ConditioningMode m) noexcept {
    switch (m) {
        case ConditioningMode::Caci: return "caci";
        case ConditioningMode::SyncCond: return "synccond";
        case ConditioningMode::CaciRelDiffusion: return "caci-rel-t";
    }
    return "?";
}

ConditioningMode parse_conditioning(std::string_view s) {
    if (s == "caci") return ConditioningMode::Caci;
    if (s == "synccond") return ConditioningMode::SyncCond;
    if (s == "caci-rel-t") return ConditioningMode::CaciRelDiffusion;
    throw std::invalid_argument("unknown conditioning mode '" + std::string(s) +
                                "' (expected caci, synccond or caci-rel-t)");
}

CaciPlan caci_plan(ConditioningMode mode) noexcept {
    using enum SegmentKind;
    using enum TimestepSource;
    CaciPlan p;
    p.mode = mode;
    p.entries[index_of(Rel)] = {Zero, Rel};
    p.entries[index_of(IndCond)] = {Zero, IndCond};
    p.entries[index_of(IndTgt)] = {Diffusion, IndTgt};
    p.entries[index_of(VisCond)] = {Zero, IndCond};
    p.entries[index_of(VisTgt)] = {Diffusion, IndTgt};
    if (mode == ConditioningMode::SyncCond) {
        for (auto& e : p.entries) e.timestep = Diffusion;
    } else if (mode == ConditioningMode::CaciRelDiffusion) {
        p.entries[index_of(Rel)].timestep = Diffusion;
    }
    return p;
}

Tensor timestep_embedding(float t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) {
        throw std::invalid_argument("timestep_embedding: dim " + std::to_string(dim) + " must be even and positive");
    }
    const std::size_t half = dim / 2;
    Tensor e = Tensor::vector(dim);
    const double scaled = 1000.0 * static_cast<double>(t);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = scaled * freq;
        e[i] = static_cast<float>(std::sin(arg));
        e[half + i] = static_cast<float>(std::cos(arg));
    }
    return e;
}

Tensor pool_prompt(const Tensor& tokens) {
    const std::size_t n = tokens.rows();
    const std::size_t d = tokens.cols();
    if (n == 0) throw std::invalid_argument("pool_prompt: empty segment");
    Tensor out = Tensor::vector(d);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += tokens(i, j);
        out[j] = static_cast<float>(s / static_cast<double>(n));
    }
    return out;
}

float silu(float x) noexcept { return x / (1.0F + std::exp(-x)); }

float silu_grad(float x) noexcept {
    const float s = 1.0F / (1.0F + std::exp(-x));
    return s * (1.0F + x * (1.0F - s));
}

Tensor conditioning_input(const CaciPlan& plan, SegmentKind seg, float t, const PooledPrompts& pooled) {
    const SegmentConditioning& sc = plan.at(seg);
    const auto& ctx = pooled[index_of(sc.context)];
    if (!ctx) {
        throw std::invalid_argument("no pooled prompt for context segment " + std::string(to_string(sc.context)) +
                                    " (needed by " + std::string(to_string(seg)) + ")");
    }
    Tensor u = timestep_embedding(plan.resolve_t(seg, t), ctx->size());
    add_inplace(u, *ctx);
    return u;
}

Tensor conditioner_forward(const Tensor& u, const ConditionerWeights& w, ConditionerCache* cache) {
    Tensor h1 = matmul_nt(u, w.w1);
    for (std::size_t i = 0; i < h1.rows(); ++i) {
        auto r = h1.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += w.b1[j];
    }
    Tensor a1 = h1;
    for (float& v : a1.values()) v = silu(v);
    Tensor c = matmul_nt(a1, w.w2);
    for (std::size_t i = 0; i < c.rows(); ++i) {
        auto r = c.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += w.b2[j];
    }
    Tensor sc = c;
    for (float& v : sc.values()) v = silu(v);
    if (cache) *cache = ConditionerCache{u, std::move(h1), std::move(a1), std::move(c)};
    return sc;
}

Tensor modulation_rows(const Tensor& sc, const Tensor& w, const Tensor& b) {
    Tensor m = matmul_nt(sc, w);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
    }
    return m;
}

ModulationEntry split_modulation(std::span<const float> row) {
    if (row.size() % 6 != 0) throw std::invalid_argument("modulation row width must be a multiple of 6");
    const std::size_t d = row.size() / 6;
    auto part = [&](std::size_t k) {
        Tensor t = Tensor::vector(d);
        for (std::size_t j = 0; j < d; ++j) t[j] = row[k * d + j];
        return t;
    };
    return {part(0), part(1), part(2), part(3), part(4), part(5)};
}

ModulationEntry modulation_for(const CaciPlan& plan, SegmentKind seg, float t, const PooledPrompts& pooled,
                               const ConditionerWeights& conditioner, const ModulationWeights& modulation) {
    Tensor u = conditioning_input(plan, seg, t, pooled);
    u.reshape({1, u.size()});
    const Tensor sc = conditioner_forward(u, conditioner);
    const Tensor m = modulation_rows(sc, modulation.w, modulation.b);
    return split_modulation(m.row(0));
}

}  // namespace nextshot
