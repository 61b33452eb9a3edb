// SPDX-License-Identifier: Apache-2.0
#include "nextshot/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace nextshot {

NoisingState noise_target(const Tensor& z0, float t, Rng& rng) {
    if (!(t >= 0.0F && t <= 1.0F)) throw std::invalid_argument("noise_target: t must lie in [0, 1]");
    NoisingState s{Tensor(z0.shape()), Tensor(z0.shape())};
    rng.fill_normal(s.eps);
    const float a = 1.0F - t;
    for (std::size_t i = 0; i < z0.size(); ++i) s.z_t[i] = a * z0[i] + t * s.eps[i];
    return s;
}

double masked_velocity_loss(const Tensor& output, const Tensor& target, const SegmentLayout& layout,
                            std::size_t batch, Tensor* d_output) {
    const std::size_t n = layout.total();
    const std::size_t p = layout.length(SegmentKind::VisTgt);
    const std::size_t off = layout.offset(SegmentKind::VisTgt);
    if (batch == 0) throw std::invalid_argument("masked_velocity_loss: empty batch");
    if (output.rank() != 2 || target.rank() != 2 || output.rows() != batch * n || target.rows() != batch * p ||
        output.cols() != target.cols()) {
        throw std::invalid_argument("masked_velocity_loss: output " + output.shape_string() + " and target " +
                                    target.shape_string() + " do not match the layout");
    }
    const std::size_t l = output.cols();
    const double count = static_cast<double>(batch * p * l);
    double sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < p; ++r) {
            const float* o = output.data() + (b * n + off + r) * l;
            const float* y = target.data() + (b * p + r) * l;
            for (std::size_t c = 0; c < l; ++c) {
                const double e = static_cast<double>(o[c]) - static_cast<double>(y[c]);
                sum += e * e;
            }
        }
    }
    if (d_output) {
        *d_output = Tensor(output.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t r = 0; r < p; ++r) {
                const float* o = output.data() + (b * n + off + r) * l;
                const float* y = target.data() + (b * p + r) * l;
                float* g = d_output->data() + (b * n + off + r) * l;
                for (std::size_t c = 0; c < l; ++c) {
                    g[c] = static_cast<float>(2.0 * (static_cast<double>(o[c]) - static_cast<double>(y[c])) / count);
                }
            }
        }
    }
    return sum / count;
}

std::vector<PairLatents> encode_pairs(const std::vector<ShotPair>& pairs, std::size_t patch) {
    std::vector<PairLatents> out;
    out.reserve(pairs.size());
    for (const ShotPair& p : pairs) out.push_back({&p, encode_latent(p.cond, patch), encode_latent(p.tgt, patch)});
    return out;
}

namespace {

std::size_t rel_length(const ModelConfig& config) {
    return config.with_rel ? config.len_rel : kRelationalLength;
}

void copy_rows(Tensor& dst, std::size_t row, const Tensor& src) {
    std::copy_n(src.data(), src.size(), dst.data() + row * dst.cols());
}

}  // namespace

TrainingBatch make_training_batch(const ModelConfig& config, std::span<const PairLatents* const> items,
                                  float dropout, Rng& rng) {
    const std::size_t bsz = items.size();
    if (bsz == 0) throw std::invalid_argument("training batch must be nonempty");
    const std::size_t p = config.tokens_per_image();
    const std::size_t l = config.latent_width();
    TrainingBatch tb;
    tb.batch.z_cond = Tensor::matrix(bsz * p, l);
    tb.batch.z_t = Tensor::matrix(bsz * p, l);
    tb.target = Tensor::matrix(bsz * p, l);
    for (std::size_t b = 0; b < bsz; ++b) {
        const PairLatents& item = *items[b];
        Rng r = rng.split(static_cast<std::uint64_t>(b));
        const auto t = static_cast<float>(r.uniform_open());
        Rng noise = r.split("noise");
        NoisingState ns = noise_target(item.z_tgt, t, noise);
        Rng drop = r.split("dropout");
        tb.batch.prompts.push_back(
            encode_prompt(item.pair->prompt, dropout, drop, dropout > 0.0F, rel_length(config), config.len_ind));
        tb.batch.t.push_back(t);
        copy_rows(tb.batch.z_cond, b * p, item.z_cond);
        copy_rows(tb.batch.z_t, b * p, ns.z_t);
        float* y = tb.target.data() + b * p * l;
        for (std::size_t i = 0; i < p * l; ++i) y[i] = ns.eps[i] - item.z_tgt[i];
    }
    return tb;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(const ParamStore& params, AdamConfig config) : config_(config) {
    if (!(config.lr > 0.0) || !std::isfinite(config.lr)) throw std::invalid_argument("learning rate must be positive");
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.trainable(i)) continue;
        m_[i].assign(params[i].size(), 0.0);
        v_[i].assign(params[i].size(), 0.0);
    }
}

void Adam::step(ParamStore& params, const Gradients& grads) {
    if (grads.size() != params.size()) throw std::invalid_argument("Adam: gradient list does not match parameters");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.trainable(i)) continue;
        Tensor& w = params[i];
        const Tensor& g = grads[i];
        if (g.size() != w.size()) throw std::invalid_argument("Adam: gradient size mismatch for " + params.name(i));
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k];
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
            const double upd = config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
            w[k] = static_cast<float>(static_cast<double>(w[k]) - upd);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::string_view to_string(StageMode m) noexcept {
    switch (m) {
        case StageMode::TwoStage: return "two-stage";
        case StageMode::RawOnly: return "raw-only";
        case StageMode::CuratedOnly: return "curated-only";
    }
    return "?";
}

StageMode parse_stage(std::string_view s) {
    for (StageMode m : {StageMode::TwoStage, StageMode::RawOnly, StageMode::CuratedOnly}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown stage mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be positive");
    if (batch == 0) throw std::invalid_argument("train: batch must be >= 1");
    if (!(dropout >= 0.0F && dropout <= 1.0F)) throw std::invalid_argument("train: dropout must lie in [0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"batch", batch},
            {"broad_passes", broad_passes},
            {"broad_steps", broad_steps},
            {"curated_steps", curated_steps},
            {"conditioning", std::string(nextshot::to_string(conditioning))},
            {"stage", std::string(nextshot::to_string(stage))},
            {"dropout", dropout},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.batch = j.value("batch", c.batch);
    c.broad_passes = j.value("broad_passes", c.broad_passes);
    c.broad_steps = j.value("broad_steps", c.broad_steps);
    c.curated_steps = j.value("curated_steps", c.curated_steps);
    if (j.contains("conditioning")) c.conditioning = parse_conditioning(j.at("conditioning").get<std::string>());
    if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

std::pair<std::size_t, std::size_t> TrainConfig::stage_steps(std::size_t broad_size, std::size_t /*curated_size*/) const {
    std::size_t broad = 0;
    if (stage != StageMode::CuratedOnly) {
        broad = broad_steps > 0 ? broad_steps : (broad_passes * broad_size + batch - 1) / batch;
    }
    const std::size_t curated = stage != StageMode::RawOnly ? curated_steps : 0;
    return {broad, curated};
}

std::vector<LossRecord> train_two_stage(Model& model, const std::vector<ShotPair>& broad,
                                        const std::vector<ShotPair>& curated, const TrainConfig& config,
                                        const TrainObserver& observer) {
    config.validate();
    const auto [broad_steps, curated_steps] = config.stage_steps(broad.size(), curated.size());
    if (broad_steps > 0 && broad.empty()) throw std::invalid_argument("train: broad-stage dataset is empty");
    if (curated_steps > 0 && curated.empty()) throw std::invalid_argument("train: curated-stage dataset is empty");

    const ModelConfig& mc = model.config();
    const CaciPlan plan = caci_plan(config.conditioning);
    Adam adam(model.params(), AdamConfig{config.lr});
    const Rng root(config.seed);
    std::vector<LossRecord> records;
    std::size_t step = 0;

    auto run_stage = [&](const std::string& tag, const std::vector<ShotPair>& data, std::size_t steps) {
        if (steps == 0) return;
        const std::vector<PairLatents> latents = encode_pairs(data, mc.patch);
        const Rng order = root.split("order").split(tag);
        std::vector<std::size_t> perm(latents.size());
        std::size_t pos = perm.size();
        std::uint64_t pass = 0;
        std::vector<const PairLatents*> items(config.batch);
        for (std::size_t s = 0; s < steps; ++s) {
            for (auto& it : items) {
                if (pos == perm.size()) {
                    std::iota(perm.begin(), perm.end(), std::size_t{0});
                    Rng shuffle = order.split(pass++);
                    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
                    pos = 0;
                }
                it = &latents[perm[pos++]];
            }
            ++step;
            Rng step_rng = root.split("step").split(static_cast<std::uint64_t>(step));
            TrainingBatch tb = make_training_batch(mc, items, config.dropout, step_rng);
            ForwardState state;
            const Tensor out = model.forward(tb.batch, plan, &state);
            Tensor d_out;
            const double loss = masked_velocity_loss(out, tb.target, model.layout(), items.size(), &d_out);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "train: non-finite loss at step " << step << " (" << tag << " stage); t =";
                for (float t : tb.batch.t) msg << ' ' << t;
                msg << "; pair ids =";
                for (const PairLatents* it : items) msg << ' ' << it->pair->id;
                throw std::runtime_error(msg.str());
            }
            const Gradients grads = model.backward(tb.batch, state, d_out);
            adam.step(model.params(), grads);
            records.push_back({step, tag, loss});
            if (observer) observer(records.back(), tb.batch);
        }
    };
    run_stage("broad", broad, broad_steps);
    run_stage("curated", curated, curated_steps);
    return records;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "step,stage,loss\n";
    char buf[64];
    for (const LossRecord& r : records) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.loss);
        os << r.step << ',' << r.stage << ',' << buf << '\n';
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

double mean_loss(std::span<const LossRecord> records, std::size_t first_step, std::size_t last_step) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const LossRecord& r : records) {
        if (r.step >= first_step && r.step <= last_step) {
            sum += r.loss;
            ++n;
        }
    }
    if (n == 0) throw std::invalid_argument("mean_loss: no records in range");
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

std::vector<Tensor> sample_next_shots(const Model& model, std::span<const SampleRequest> requests,
                                      std::size_t steps, const CaciPlan& plan, const Rng& rng,
                                      const SampleObserver& observer) {
    if (steps == 0) throw std::invalid_argument("sample: steps must be >= 1");
    const ModelConfig& mc = model.config();
    const SegmentLayout& layout = model.layout();
    const std::size_t bsz = requests.size();
    const std::size_t p = mc.tokens_per_image();
    const std::size_t l = mc.latent_width();
    const std::size_t n = layout.total();
    const std::size_t off = layout.offset(SegmentKind::VisTgt);
    if (bsz == 0) return {};

    ModelBatch batch;
    batch.z_cond = Tensor::matrix(bsz * p, l);
    batch.z_t = Tensor::matrix(bsz * p, l);
    Rng unused(0);
    for (std::size_t b = 0; b < bsz; ++b) {
        const SampleRequest& req = requests[b];
        if (!req.cond || !req.prompt) throw std::invalid_argument("sample: incomplete request");
        const Tensor& img = *req.cond;
        if (img.rank() != 3 || img.dim(0) != mc.image_size || img.dim(1) != mc.image_size || img.dim(2) != 3) {
            throw std::invalid_argument("sample: condition image " + img.shape_string() + " does not match the model");
        }
        batch.prompts.push_back(encode_prompt(*req.prompt, 0.0F, unused, false, rel_length(mc), mc.len_ind));
        copy_rows(batch.z_cond, b * p, encode_latent(img, mc.patch));
        Tensor noise = Tensor::matrix(p, l);
        Rng r = rng.split(static_cast<std::uint64_t>(b));
        r.fill_normal(noise);
        copy_rows(batch.z_t, b * p, noise);
    }
    batch.t.assign(bsz, 1.0F);

    const double total = static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) / total;
        const double t_next = 1.0 - static_cast<double>(k + 1) / total;
        std::fill(batch.t.begin(), batch.t.end(), static_cast<float>(t));
        if (observer) observer({k, static_cast<float>(t), &batch});
        const Tensor v = model.forward(batch, plan);
        const auto dt = static_cast<float>(t_next - t);
        for (std::size_t b = 0; b < bsz; ++b) {
            float* z = batch.z_t.data() + b * p * l;
            const float* vb = v.data() + (b * n + off) * l;
            for (std::size_t i = 0; i < p * l; ++i) z[i] += dt * vb[i];
        }
    }

    std::vector<Tensor> out;
    out.reserve(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        out.push_back(decode_latent(batch.z_t.slice_rows(b * p, p), mc.image_size, mc.patch));
    }
    return out;
}

Tensor sample_next_shot(const Model& model, const Tensor& cond, const HierarchicalPrompt& prompt, std::size_t steps,
                        const CaciPlan& plan, const Rng& rng, const SampleObserver& observer) {
    const SampleRequest req{&cond, &prompt};
    return sample_next_shots(model, std::span<const SampleRequest>(&req, 1), steps, plan, rng, observer).front();
}

double image_mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("image_mse: shape mismatch");
    if (a.size() == 0) throw std::invalid_argument("image_mse: empty images");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += e * e;
    }
    return s / static_cast<double>(a.size());
}

}  // namespace nextshot
