// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nextshot/diffusion.hpp"
#include "nextshot/world.hpp"
#include "oracles.hpp"

using namespace nextshot;
using SK = SegmentKind;

namespace {

ModelConfig tiny() { return ModelConfig::tiny(prompt_vocab_size()); }

std::vector<ShotPair> small_dataset(std::size_t count, std::uint64_t seed, std::size_t size = 16) {
    DatasetSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.image_size = size;
    return generate_dataset(spec);
}

TrainConfig quick_config(std::size_t steps) {
    TrainConfig tc;
    tc.stage = StageMode::RawOnly;
    tc.broad_steps = steps;
    tc.batch = 4;
    tc.lr = 1e-3;
    tc.seed = 9;
    return tc;
}

bool params_equal(const Model& a, const Model& b) {
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        if (!bit_equal(a.params()[i], b.params()[i])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("noise_target: endpoints, midpoint and range") {
    Rng rng(1);
    const Tensor z0 = oracle::random_matrix(rng, 4, 12);
    Rng r0(2), r1(2), rh(2);
    const NoisingState a = noise_target(z0, 0.0F, r0);
    CHECK(bit_equal(a.z_t, z0));
    const NoisingState b = noise_target(z0, 1.0F, r1);
    CHECK(bit_equal(b.z_t, b.eps));
    const NoisingState h = noise_target(z0, 0.5F, rh);
    for (std::size_t i = 0; i < z0.size(); ++i) CHECK(h.z_t[i] == doctest::Approx(0.5 * (z0[i] + h.eps[i])));
    Rng bad(3);
    CHECK_THROWS_AS(noise_target(z0, 1.5F, bad), std::invalid_argument);
    CHECK_THROWS_AS(noise_target(z0, -0.1F, bad), std::invalid_argument);
}

TEST_CASE("masked_velocity_loss: zero at the target, ignores other rows, scalar oracle") {
    const SegmentLayout l = build_layout(2, 3, 3, 4, 4);
    const std::size_t bsz = 2, n = l.total(), p = 4, w = 6, off = l.offset(SK::VisTgt);
    Rng rng(4);
    const Tensor target = oracle::random_matrix(rng, bsz * p, w);
    Tensor out = oracle::random_matrix(rng, bsz * n, w);
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t r = 0; r < p; ++r) {
            for (std::size_t c = 0; c < w; ++c) out(b * n + off + r, c) = target(b * p + r, c);
        }
    }
    CHECK(masked_velocity_loss(out, target, l, bsz) == 0.0);

    Tensor noisy = oracle::random_matrix(rng, bsz * n, w);
    const double base = masked_velocity_loss(noisy, target, l, bsz);
    Tensor corrupted = noisy;
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t r = 0; r < off; ++r) {
            for (std::size_t c = 0; c < w; ++c) corrupted(b * n + r, c) = 1e6F;
        }
    }
    CHECK(masked_velocity_loss(corrupted, target, l, bsz) == base);

    double sum = 0.0;
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t r = 0; r < p; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double e = static_cast<double>(noisy(b * n + off + r, c)) - target(b * p + r, c);
                sum += e * e;
            }
        }
    }
    CHECK(base == doctest::Approx(sum / (bsz * p * w)).epsilon(1e-12));

    Tensor grad;
    masked_velocity_loss(noisy, target, l, bsz, &grad);
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const float g = grad(b * n + r, c);
                if (r < off) {
                    CHECK(g == 0.0F);
                } else {
                    const double e = static_cast<double>(noisy(b * n + r, c)) - target(b * p + r - off, c);
                    CHECK(g == doctest::Approx(2.0 * e / (bsz * p * w)).epsilon(1e-6));
                }
            }
        }
    }
    CHECK_THROWS_AS(masked_velocity_loss(noisy, target.slice_rows(0, p), l, bsz), std::invalid_argument);
}

TEST_CASE("train: zero steps leave the initialization untouched") {
    const auto data = small_dataset(8, 1);
    Model model(tiny(), 5);
    const Model init = model;
    TrainConfig tc = quick_config(0);
    tc.broad_passes = 0;
    const auto records = train_two_stage(model, data, {}, tc);
    CHECK(records.empty());
    CHECK(params_equal(model, init));
}

TEST_CASE("train: same seed gives bit-identical parameters and losses") {
    const auto data = small_dataset(12, 2);
    Model a(tiny(), 6), b(tiny(), 6);
    const auto ra = train_two_stage(a, data, {}, quick_config(6));
    const auto rb = train_two_stage(b, data, {}, quick_config(6));
    REQUIRE(ra.size() == 6);
    REQUIRE(rb.size() == 6);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].step == i + 1);
        CHECK(ra[i].loss == rb[i].loss);
    }
    CHECK(params_equal(a, b));

    Model c(tiny(), 6);
    TrainConfig other = quick_config(6);
    other.seed = 10;
    train_two_stage(c, data, {}, other);
    CHECK_FALSE(params_equal(a, c));
}

TEST_CASE("train: two stages count steps across both and tag each record") {
    const auto data = small_dataset(8, 3);
    std::vector<ShotPair> curated(data.begin(), data.begin() + 4);
    Model model(tiny(), 7);
    TrainConfig tc = quick_config(3);
    tc.stage = StageMode::TwoStage;
    tc.curated_steps = 2;
    const auto records = train_two_stage(model, data, curated, tc);
    REQUIRE(records.size() == 5);
    CHECK(records[2].stage == "broad");
    CHECK(records[3].stage == "curated");
    CHECK(records[4].step == 5);
    CHECK_THROWS_AS(train_two_stage(model, data, {}, tc), std::invalid_argument);
}

TEST_CASE("train: clean-segment modulation ignores the sampled t under Caci") {
    const auto data = small_dataset(8, 4);
    Model model(tiny(), 8);
    testsupport::perturb_trainables(model, 9);
    const CaciPlan plan = caci_plan(ConditioningMode::Caci);
    const std::size_t p = model.config().tokens_per_image();
    std::size_t checked = 0;
    const Model frozen = model;
    TrainConfig tc = quick_config(3);
    tc.lr = 1e-12;
    train_two_stage(model, data, {}, tc, [&](const LossRecord&, const ModelBatch& batch) {
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const ModelInput in = frozen.embed(batch.prompts[s], batch.z_cond.slice_rows(s * p, p),
                                               batch.z_t.slice_rows(s * p, p), batch.t[s]);
            const PooledPrompts pooled = frozen.pooled_prompts(in);
            for (std::size_t k = 0; k < frozen.config().blocks; ++k) {
                const ModulationEntry at_t = frozen.modulation(k, plan, SK::VisCond, batch.t[s], pooled);
                const ModulationEntry at_0 = frozen.modulation(k, plan, SK::VisCond, 0.0F, pooled);
                CHECK(bit_equal(at_t.scale_attn, at_0.scale_attn));
                CHECK(bit_equal(at_t.gate_mlp, at_0.gate_mlp));
                const ModulationEntry tgt_t = frozen.modulation(k, plan, SK::VisTgt, batch.t[s], pooled);
                const ModulationEntry tgt_0 = frozen.modulation(k, plan, SK::VisTgt, 0.0F, pooled);
                CHECK_FALSE(bit_equal(tgt_t.scale_attn, tgt_0.scale_attn));
                ++checked;
            }
        }
    });
    CHECK(checked == 3 * 4 * 2);
}

TEST_CASE("Adam: frozen parameters untouched, first step moves by lr against the gradient sign") {
    ParamStore ps;
    ps.add("frozen", Tensor::from_rows({{1, 2}}), false);
    ps.add("w", Tensor::from_rows({{1, -2, 0.5}}), true);
    Adam adam(ps, AdamConfig{0.1});
    Gradients g(2);
    g[1] = Tensor::from_rows({{0.3F, -4.0F, 0.0F}});
    adam.step(ps, g);
    CHECK(bit_equal(ps[0], Tensor::from_rows({{1, 2}})));
    CHECK(ps[1](0, 0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(ps[1](0, 1) == doctest::Approx(-1.9).epsilon(1e-6));
    CHECK(ps[1](0, 2) == 0.5F);
    CHECK(adam.steps() == 1);
}

TEST_CASE("TrainConfig: stage parsing, step counts, JSON round trip and validation") {
    CHECK(parse_stage("raw-only") == StageMode::RawOnly);
    CHECK(parse_stage("curated-only") == StageMode::CuratedOnly);
    CHECK(parse_stage("two-stage") == StageMode::TwoStage);
    CHECK_THROWS_AS(parse_stage("both"), std::invalid_argument);

    TrainConfig tc;
    CHECK(tc.lr == 1e-4);
    CHECK(tc.batch == 16);
    CHECK(tc.curated_steps == 500);
    CHECK(tc.stage_steps(100, 10) == std::pair<std::size_t, std::size_t>{13, 500});
    tc.stage = StageMode::CuratedOnly;
    CHECK(tc.stage_steps(100, 10) == std::pair<std::size_t, std::size_t>{0, 500});
    tc.stage = StageMode::RawOnly;
    tc.broad_steps = 7;
    CHECK(tc.stage_steps(100, 10) == std::pair<std::size_t, std::size_t>{7, 0});

    tc.conditioning = ConditioningMode::SyncCond;
    tc.seed = 42;
    CHECK(TrainConfig::from_json(tc.to_json()).to_json() == tc.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json({{"lr", -1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json({{"batch", 0}}), std::invalid_argument);
    CHECK_THROWS_AS(TrainConfig::from_json({{"dropout", 1.5}}), std::invalid_argument);
}

TEST_CASE("loss records: CSV format and windowed mean") {
    const std::vector<LossRecord> recs = {{1, "broad", 1.0}, {2, "broad", 3.0}, {3, "curated", 0.25}};
    CHECK(mean_loss(recs, 1, 2) == 2.0);
    CHECK(mean_loss(recs, 3, 9) == 0.25);
    CHECK_THROWS_AS(mean_loss(recs, 4, 9), std::invalid_argument);
    const auto path = std::filesystem::temp_directory_path() / "nextshot_test_loss.csv";
    write_loss_csv(path, recs);
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    std::filesystem::remove(path);
    CHECK(ss.str() == "step,stage,loss\n1,broad,1\n2,broad,3\n3,curated,0.25\n");
}

TEST_CASE("sampler: zero velocity returns the initial noise") {
    Model model(tiny(), 11);
    model.params()[model.out_proj().base].fill(0.0F);
    const ShotPair pair = make_pair(1, EditPattern::CutIn, 16);
    const Rng rng(12);
    const Tensor img = sample_next_shot(model, pair.cond, pair.prompt, 5, caci_plan(ConditioningMode::Caci), rng);
    const std::size_t p = model.config().tokens_per_image();
    Tensor noise = Tensor::matrix(p, model.config().latent_width());
    Rng r = rng.split(std::uint64_t{0});
    r.fill_normal(noise);
    CHECK(bit_equal(img, decode_latent(noise, 16, model.config().patch)));
}

TEST_CASE("sampler: one Euler step subtracts the predicted velocity at t = 1") {
    Model model(tiny(), 13);
    testsupport::perturb_trainables(model, 14);
    const ShotPair pair = make_pair(2, EditPattern::Cutaway, 16);
    const Rng rng(15);
    const CaciPlan plan = caci_plan(ConditioningMode::Caci);
    ModelBatch seen;
    const Tensor img = sample_next_shot(model, pair.cond, pair.prompt, 1, plan, rng,
                                        [&](const SampleStep& s) { seen = *s.batch; });
    REQUIRE(seen.size() == 1);
    CHECK(seen.t[0] == 1.0F);
    const Tensor v = model.forward(seen, plan);
    const std::size_t p = model.config().tokens_per_image(), off = model.layout().offset(SK::VisTgt);
    Tensor z = seen.z_t;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= v[off * z.cols() + i];
    CHECK(max_abs_diff(img, decode_latent(z, 16, model.config().patch)) < 1e-6);
    CHECK(p * z.cols() == z.size());
}

TEST_CASE("sampler: determinism, fixed condition latents, t schedule and batch independence") {
    Model model(tiny(), 16);
    testsupport::perturb_trainables(model, 17);
    const ShotPair a = make_pair(3, EditPattern::CutIn, 16);
    const ShotPair b = make_pair(4, EditPattern::CutOut, 16);
    const CaciPlan plan = caci_plan(ConditioningMode::Caci);
    const Rng rng(18);
    std::vector<float> ts;
    Tensor first_cond;
    bool cond_constant = true;
    const std::vector<SampleRequest> reqs = {{&a.cond, &a.prompt}, {&b.cond, &b.prompt}};
    const auto out1 = sample_next_shots(model, reqs, 10, plan, rng, [&](const SampleStep& s) {
        ts.push_back(s.t);
        if (s.step == 0) first_cond = s.batch->z_cond;
        cond_constant = cond_constant && bit_equal(s.batch->z_cond, first_cond);
    });
    const auto out2 = sample_next_shots(model, reqs, 10, plan, rng);
    CHECK(cond_constant);
    CHECK(bit_equal(first_cond.slice_rows(0, 16), encode_latent(a.cond, 4)));
    REQUIRE(ts.size() == 10);
    CHECK(ts.front() == 1.0F);
    CHECK(ts.back() == doctest::Approx(0.1));
    REQUIRE(out1.size() == 2);
    CHECK(bit_equal(out1[0], out2[0]));
    CHECK(bit_equal(out1[1], out2[1]));
    const Tensor alone = sample_next_shot(model, a.cond, a.prompt, 10, plan, rng);
    CHECK(max_abs_diff(alone, out1[0]) < 1e-5);
    CHECK_THROWS_AS(sample_next_shots(model, reqs, 0, plan, rng), std::invalid_argument);
    const ShotPair big = make_pair(5, EditPattern::CutIn, 32);
    CHECK_THROWS_AS(sample_next_shot(model, big.cond, big.prompt, 2, plan, rng), std::invalid_argument);
}

TEST_CASE("image_mse: example and shape mismatch") {
    const Tensor a({1, 2, 3}, std::vector<float>{0, 0, 0, 1, 1, 1});
    const Tensor b({1, 2, 3}, 0.0F);
    CHECK(image_mse(a, b) == 0.5);
    CHECK_THROWS_AS(image_mse(a, Tensor({2, 1, 3})), std::invalid_argument);
}
