// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: dataset generation, training, sampling,
// evaluation, mask inspection and stream curation.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nextshot/caci.hpp"
#include "nextshot/curation.hpp"
#include "nextshot/diffusion.hpp"
#include "nextshot/ham.hpp"
#include "nextshot/metrics.hpp"
#include "nextshot/model.hpp"
#include "nextshot/rng.hpp"
#include "nextshot/tensor_io.hpp"
#include "nextshot/world.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nextshot;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand.
struct CommonOptions {
    std::uint64_t seed = 0;
    std::string config;
    std::string conditioning = "caci";
    std::string layout = "full";
    std::string stage = "two-stage";
    std::optional<std::size_t> steps;
    std::string out;
};

json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path);
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config " + path + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

fs::path manifest_path(const std::string& arg) {
    fs::path p(arg);
    if (fs::is_directory(p)) p /= "manifest.jsonl";
    if (!fs::exists(p)) throw std::runtime_error("manifest not found: " + p.string());
    return p;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Serialized verbatim into every output directory. The hash leaves out the
/// output directory so reruns into a fresh directory hash identically.
struct RunConfig {
    json body = json::object();

    RunConfig(const std::string& subcommand, const CommonOptions& o) {
        body["subcommand"] = subcommand;
        body["seed"] = o.seed;
        body["conditioning"] = o.conditioning;
        body["layout"] = o.layout;
        body["stage"] = o.stage;
        body["steps"] = o.steps ? json(*o.steps) : json(nullptr);
        body["config_file"] = o.config.empty() ? json(nullptr) : json(o.config);
        body["datasets"] = json::object();
    }

    std::string hash() const {
        json h = body;
        h.erase("out");
        return hex64(fnv1a64(h.dump()));
    }

    void write(const fs::path& out) {
        body["out"] = out.string();
        fs::create_directories(out);
        json doc = body;
        doc["config_hash"] = hash();
        write_text(out / "run_config.json", doc.dump(2) + "\n");
    }
};

void require_out(const CommonOptions& o) {
    if (o.out.empty()) throw UsageError("--out is required");
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenOptions {
    std::size_t n = 100;
    std::string mix = "uniform";
    std::string split = "train";
    std::size_t image_size = 32;
    std::optional<float> min_lighting;
    bool require_secondary = false;
    bool balance = false;
};

int run_gen_data(const CommonOptions& o, const GenOptions& g) {
    require_out(o);
    if (g.n == 0) throw UsageError("--n must be >= 1");
    DatasetSpec spec;
    spec.count = g.n;
    spec.seed = o.seed;
    spec.image_size = g.image_size;
    spec.split = g.split;
    try {
        spec.mix = parse_mix(g.mix);
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("--mix: ") + e.what());
    }
    std::vector<ShotPair> pairs = generate_dataset(spec);
    const bool curated = g.min_lighting || g.require_secondary || g.balance;
    if (curated) {
        CurationCriteria c;
        c.min_lighting = g.min_lighting;
        c.require_secondary = g.require_secondary;
        c.balance_patterns = g.balance;
        pairs = curate(pairs, c);
    }

    RunConfig rc("gen-data", o);
    rc.body["gen"] = {{"n", g.n},
                      {"mix", g.mix},
                      {"split", g.split},
                      {"image_size", g.image_size},
                      {"min_lighting", g.min_lighting ? json(*g.min_lighting) : json(nullptr)},
                      {"require_secondary", g.require_secondary},
                      {"balance", g.balance}};
    const fs::path out(o.out);
    rc.write(out);

    std::array<std::size_t, kPatternCount> counts{};
    for (const ShotPair& p : pairs) ++counts[static_cast<std::size_t>(p.pattern)];
    json per_pattern = json::object();
    for (std::size_t i = 0; i < kPatternCount; ++i) per_pattern[std::string(to_string(kAllPatterns[i]))] = counts[i];
    const json provenance{{"kind", "synthetic-pairs"},
                          {"split", g.split},
                          {"seed", o.seed},
                          {"requested", g.n},
                          {"count", pairs.size()},
                          {"image_size", g.image_size},
                          {"curated", curated},
                          {"pattern_counts", per_pattern},
                          {"config_hash", rc.hash()}};
    write_manifest(out, pairs, provenance);
    std::cout << "wrote " << pairs.size() << " pairs to " << (out / "manifest.jsonl").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::string data;
    std::string curated;
    std::string preset = "desk";
    std::optional<std::size_t> curated_steps;
    std::optional<double> lr;
    std::optional<std::size_t> batch;
};

ModelConfig preset_config(const std::string& name) {
    const std::size_t vocab = prompt_vocab_size();
    if (name == "desk") return ModelConfig::desk(vocab);
    if (name == "small") return ModelConfig::small(vocab);
    if (name == "tiny") return ModelConfig::tiny(vocab);
    throw UsageError("--preset must be desk, small or tiny");
}

/// Training data may never come from the held-out split.
std::vector<ShotPair> load_training_set(const std::string& arg, json& record) {
    const fs::path path = manifest_path(arg);
    const json prov = read_provenance(path);
    const std::string split = prov.value("split", std::string("unknown"));
    if (split == "heldout") {
        throw std::runtime_error("refusing to train on held-out manifest " + path.string());
    }
    record = {{"path", path.string()}, {"split", split}, {"seed", prov.value("seed", json(nullptr))}};
    return read_manifest(path);
}

int run_train(const CommonOptions& o, const TrainOptions& t) {
    require_out(o);
    if (o.layout != "full" && o.layout != "no-rel") throw UsageError("--layout must be full or no-rel");

    json file = o.config.empty() ? json::object() : read_json_file(o.config);
    json model_json = preset_config(t.preset).to_json();
    if (file.contains("model")) model_json.merge_patch(file.at("model"));
    model_json["with_rel"] = o.layout == "full";
    model_json["vocab"] = prompt_vocab_size();
    const ModelConfig mc = ModelConfig::from_json(model_json);

    json train_json = TrainConfig{}.to_json();
    if (file.contains("train")) train_json.merge_patch(file.at("train"));
    train_json["conditioning"] = o.conditioning;
    train_json["stage"] = o.stage;
    train_json["seed"] = o.seed;
    if (o.steps) train_json["broad_steps"] = *o.steps;
    if (t.curated_steps) train_json["curated_steps"] = *t.curated_steps;
    if (t.lr) train_json["lr"] = *t.lr;
    if (t.batch) train_json["batch"] = *t.batch;
    TrainConfig tc;
    try {
        tc = TrainConfig::from_json(train_json);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    RunConfig rc("train", o);
    std::vector<ShotPair> broad, curated;
    const auto [need_broad, need_curated] = tc.stage_steps(1, 1);
    if (need_broad > 0 || tc.stage != StageMode::CuratedOnly) {
        if (t.data.empty()) throw UsageError("--data is required for stage " + o.stage);
        broad = load_training_set(t.data, rc.body["datasets"]["broad"]);
    }
    if (need_curated > 0) {
        if (!t.curated.empty()) {
            curated = load_training_set(t.curated, rc.body["datasets"]["curated"]);
        } else {
            for (const ShotPair& p : broad) {
                if (p.curated) curated.push_back(p);
            }
            if (curated.empty()) {
                throw std::runtime_error("stage " + o.stage + " needs a curated dataset (--curated)");
            }
            rc.body["datasets"]["curated"] = "curated subset of broad";
        }
    }
    for (const auto* set : {&broad, &curated}) {
        for (const ShotPair& p : *set) {
            if (p.cond.rank() != 3 || p.cond.dim(0) != mc.image_size) {
                throw std::runtime_error("pair " + std::to_string(p.id) + " has image " + p.cond.shape_string() +
                                         ", model expects " + std::to_string(mc.image_size) + " px");
            }
        }
    }
    rc.body["model"] = mc.to_json();
    rc.body["train"] = tc.to_json();
    rc.body["preset"] = t.preset;
    const fs::path out(o.out);
    rc.write(out);

    Model model(mc, o.seed);
    const auto records = train_two_stage(model, broad, curated, tc);
    save_checkpoint(out / "checkpoint.nsck", model);
    write_loss_csv(out / "loss.csv", records);
    if (!records.empty()) {
        std::printf("trained %zu steps; final loss %.6f\n", records.size(), records.back().loss);
    } else {
        std::printf("trained 0 steps\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleOptions {
    std::string checkpoint;
    std::string data;
};

int run_sample(const CommonOptions& o, const SampleOptions& s) {
    require_out(o);
    if (s.checkpoint.empty() || s.data.empty()) throw UsageError("--checkpoint and --data are required");
    const std::size_t steps = o.steps.value_or(50);
    if (steps == 0) throw UsageError("--steps must be >= 1");
    const ConditioningMode mode = parse_conditioning(o.conditioning);

    const Model model = load_checkpoint(s.checkpoint);
    const fs::path path = manifest_path(s.data);
    const json prov = read_provenance(path);
    std::vector<ShotPair> pairs = read_manifest(path);
    std::sort(pairs.begin(), pairs.end(), [](const ShotPair& a, const ShotPair& b) { return a.id < b.id; });

    const ModelConfig& mc = model.config();
    std::vector<SampleRequest> requests;
    std::vector<std::size_t> accepted;
    json failures = json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const Tensor& c = pairs[i].cond;
        if (c.rank() != 3 || c.dim(0) != mc.image_size || c.dim(1) != mc.image_size || c.dim(2) != 3) {
            failures.push_back({{"id", pairs[i].id}, {"reason", "condition image " + c.shape_string() +
                                                                     " does not match the model"}});
            continue;
        }
        requests.push_back({&pairs[i].cond, &pairs[i].prompt});
        accepted.push_back(i);
    }

    RunConfig rc("sample", o);
    rc.body["checkpoint"] = s.checkpoint;
    rc.body["datasets"]["condition"] = path.string();
    rc.body["model"] = mc.to_json();
    const fs::path out(o.out);
    rc.write(out);

    const std::vector<Tensor> samples = sample_next_shots(model, requests, steps, caci_plan(mode), Rng(o.seed));
    std::vector<ShotPair> generated;
    for (std::size_t k = 0; k < accepted.size(); ++k) {
        ShotPair p = pairs[accepted[k]];
        p.tgt = samples[k];
        generated.push_back(std::move(p));
    }
    const json provenance{{"kind", "samples"},
                          {"split", "generated"},
                          {"source_split", prov.value("split", std::string("unknown"))},
                          {"source_manifest", path.string()},
                          {"checkpoint", s.checkpoint},
                          {"steps", steps},
                          {"conditioning", o.conditioning},
                          {"seed", o.seed},
                          {"count", generated.size()},
                          {"config_hash", rc.hash()}};
    write_manifest(out, generated, provenance);
    write_text(out / "failures.json", failures.dump(2) + "\n");
    std::printf("sampled %zu pairs (%zu failed)\n", generated.size(), failures.size());
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::string generated;
    std::string gt;
    std::string baseline;
    std::size_t embed_dim = 16;
    std::uint64_t embed_seed = 0;
};

int run_eval(const CommonOptions& o, const EvalOptions& e) {
    require_out(o);
    if (e.generated.empty() || e.gt.empty()) throw UsageError("--generated and --gt are required");
    const fs::path gen_path = manifest_path(e.generated);
    const fs::path gt_path = manifest_path(e.gt);
    const json gen_prov = read_provenance(gen_path);
    const json gt_prov = read_provenance(gt_path);
    if (gt_prov.value("split", std::string()) != "heldout") {
        throw std::runtime_error("ground truth " + gt_path.string() + " is not a held-out manifest");
    }
    if (gen_prov.value("source_split", std::string()) != "heldout") {
        throw std::runtime_error("samples " + gen_path.string() + " were not drawn from a held-out manifest");
    }
    const std::vector<ShotPair> gen = read_manifest(gen_path);
    const std::vector<ShotPair> gt = read_manifest(gt_path);
    if (gt.empty()) throw std::runtime_error("ground truth manifest is empty");
    const std::size_t size = gt.front().cond.dim(0);

    RunConfig rc("eval", o);
    rc.body["datasets"]["generated"] = gen_path.string();
    rc.body["datasets"]["ground_truth"] = gt_path.string();
    rc.body["embedder"] = {{"dim", e.embed_dim}, {"seed", e.embed_seed}};
    const fs::path out(o.out);
    rc.write(out);

    const ImageEmbedder a = palette_embedder();
    const ImageEmbedder b = projection_embedder(size, e.embed_dim, e.embed_seed);
    const TextEmbedder text = render_text_embedder(b, size);
    const EvalReport report = evaluate(gen, gt, a, b, text, rc.hash());
    write_text(out / "report.json", report.to_json().dump(2) + "\n");
    std::printf("consistency_a %.4f  consistency_b %.4f  text_fidelity %.4f  fid %.4f  (n=%zu)\n",
                report.consistency_a, report.consistency_b, report.text_fidelity, report.fid, report.count);
    if (!e.baseline.empty()) {
        const EvalReport base = EvalReport::from_json(read_json_file(e.baseline));
        std::cout << format_report_diff(report, base, "this run", "baseline");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-mask
// ---------------------------------------------------------------------------

std::vector<std::size_t> parse_lengths(const std::string& s) {
    std::vector<std::size_t> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        long long x = -1;
        try {
            x = std::stoll(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || x < 0) throw UsageError("--lengths: bad entry '" + item + "'");
        v.push_back(static_cast<std::size_t>(x));
    }
    return v;
}

int run_inspect_mask(const CommonOptions& o, const std::string& lengths) {
    require_out(o);
    const std::vector<std::size_t> len = parse_lengths(lengths);
    std::optional<SegmentLayout> layout;
    try {
        if (o.layout == "full") {
            if (len.size() != 5) throw UsageError("--lengths needs 5 entries for the full layout");
            layout = build_layout(len[0], len[1], len[2], len[3], len[4]);
        } else if (o.layout == "no-rel") {
            if (len.size() != 4) throw UsageError("--lengths needs 4 entries for the no-rel layout");
            layout = SegmentLayout::without_rel(len[0], len[1], len[2], len[3]);
        } else {
            throw UsageError("--layout must be full or no-rel");
        }
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    RunConfig rc("inspect-mask", o);
    rc.body["lengths"] = len;
    const fs::path out(o.out);
    rc.write(out);

    const std::string matrix = format_block_matrix(*layout);
    std::cout << matrix;
    write_text(out / "block_matrix.txt", matrix);
    std::ofstream pgm(out / "mask.pgm", std::ios::binary);
    write_mask_pgm(pgm, build_ham(*layout));
    if (!pgm) throw std::runtime_error("failed writing mask.pgm");
    return 0;
}

// ---------------------------------------------------------------------------
// curate-stream
// ---------------------------------------------------------------------------

struct StreamOptions {
    std::string stream;
    std::size_t shots = 0;
    std::size_t image_size = 16;
    PipelineConfig pipeline;
};

int run_curate_stream(const CommonOptions& o, const StreamOptions& s) {
    require_out(o);
    if (s.stream.empty() == (s.shots == 0)) throw UsageError("give exactly one of --stream or --synthetic-shots");
    const fs::path out(o.out);
    FrameStream stream;
    json source;
    if (!s.stream.empty()) {
        stream = FrameStream::from_stacked(load_tensor(s.stream));
        source = s.stream;
    } else {
        StreamSpec spec;
        spec.shots = s.shots;
        spec.image_size = s.image_size;
        spec.seed = o.seed;
        stream = synthetic_stream(spec);
        source = {{"synthetic", true}, {"shots", s.shots}, {"image_size", s.image_size}, {"seed", o.seed}};
    }

    RunConfig rc("curate-stream", o);
    rc.body["datasets"]["stream"] = source;
    rc.body["pipeline"] = {{"cut_threshold", s.pipeline.cut_threshold},
                           {"motion_cutoff", s.pipeline.motion_cutoff},
                           {"stride", s.pipeline.stride},
                           {"min_aesthetic", s.pipeline.thresholds.aesthetic},
                           {"min_quality", s.pipeline.thresholds.quality}};
    rc.write(out);
    if (s.stream.empty()) save_tensor(out / "stream.nst", stream.stacked());

    const PipelineResult result = run_curation(stream, synthetic_scorers(), s.pipeline);
    json spans = json::array();
    for (const ShotSpan& sp : result.spans) spans.push_back({sp.begin, sp.end});
    const json provenance{{"kind", "keyframe-pairs"},
                          {"split", "train"},
                          {"source", source},
                          {"frames", stream.frames.size()},
                          {"spans", spans},
                          {"planted_cuts", stream.planted_cuts},
                          {"keyframes", result.keyframes.size()},
                          {"filtered", result.filtered.size()},
                          {"count", result.pairs.size()},
                          {"config_hash", rc.hash()}};
    write_keyframe_manifest(out, stream, result, provenance);
    std::printf("%zu frames, %zu shots, %zu keyframes, %zu kept, %zu pairs\n", stream.frames.size(),
                result.spans.size(), result.keyframes.size(), result.filtered.size(), result.pairs.size());
    return 0;
}

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("--seed", o.seed, "Seed for every random stream");
    app->add_option("--config", o.config, "JSON file with optional \"model\" and \"train\" sections");
    app->add_option("--conditioning", o.conditioning, "Per-segment conditioning plan")
        ->check(CLI::IsMember({"caci", "synccond", "caci-rel-t"}));
    app->add_option("--layout", o.layout, "Token layout")->check(CLI::IsMember({"full", "no-rel"}));
    app->add_option("--stage", o.stage, "Training stages")
        ->check(CLI::IsMember({"two-stage", "raw-only", "curated-only"}));
    app->add_option("--steps", o.steps, "Broad-stage steps (train) or sampler steps (sample)");
    app->add_option("--out", o.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Next-shot generation toolkit"};
    app.require_subcommand(1);

    CommonOptions common;
    GenOptions gen;
    TrainOptions train;
    SampleOptions sample;
    EvalOptions eval;
    StreamOptions stream;
    std::string lengths = "1,1,1,1,1";

    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shot-pair dataset");
    add_common(gen_cmd, common);
    gen_cmd->add_option("--n", gen.n, "Number of pairs");
    gen_cmd->add_option("--mix", gen.mix, "Pattern weights, e.g. cut-in=0.5,cutaway=0.5, or uniform");
    gen_cmd->add_option("--split", gen.split, "Seed range")->check(CLI::IsMember({"train", "heldout"}));
    gen_cmd->add_option("--image-size", gen.image_size, "Image side in pixels");
    gen_cmd->add_option("--min-lighting", gen.min_lighting, "Curate: keep lighting above this value");
    gen_cmd->add_flag("--require-secondary", gen.require_secondary, "Curate: keep scenes with two subjects");
    gen_cmd->add_flag("--balance", gen.balance, "Curate: balance pattern counts");

    auto* train_cmd = app.add_subcommand("train", "Train the adapters of a fresh model");
    add_common(train_cmd, common);
    train_cmd->add_option("--data", train.data, "Broad-stage manifest or directory");
    train_cmd->add_option("--curated", train.curated, "Curated-stage manifest or directory");
    train_cmd->add_option("--preset", train.preset, "Model preset")->check(CLI::IsMember({"desk", "small", "tiny"}));
    train_cmd->add_option("--curated-steps", train.curated_steps, "Curated-stage steps");
    train_cmd->add_option("--lr", train.lr, "Adam learning rate");
    train_cmd->add_option("--batch", train.batch, "Batch size");

    auto* sample_cmd = app.add_subcommand("sample", "Generate target shots for a manifest");
    add_common(sample_cmd, common);
    sample_cmd->add_option("--checkpoint", sample.checkpoint, "Checkpoint file");
    sample_cmd->add_option("--data", sample.data, "Condition manifest or directory");

    auto* eval_cmd = app.add_subcommand("eval", "Score samples against held-out ground truth");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--generated", eval.generated, "Sample manifest or directory");
    eval_cmd->add_option("--gt", eval.gt, "Held-out ground-truth manifest or directory");
    eval_cmd->add_option("--baseline", eval.baseline, "Report to compare against");
    eval_cmd->add_option("--embed-dim", eval.embed_dim, "Projection embedder width");
    eval_cmd->add_option("--embed-seed", eval.embed_seed, "Projection embedder seed");

    auto* mask_cmd = app.add_subcommand("inspect-mask", "Print the attention block matrix and write the token mask");
    add_common(mask_cmd, common);
    mask_cmd->add_option("--lengths", lengths, "Comma-separated segment lengths");

    auto* stream_cmd = app.add_subcommand("curate-stream", "Cut, score, filter and pair a frame stream");
    add_common(stream_cmd, common);
    stream_cmd->add_option("--stream", stream.stream, "Stacked F x H x W x 3 tensor file");
    stream_cmd->add_option("--synthetic-shots", stream.shots, "Generate a synthetic stream with this many shots");
    stream_cmd->add_option("--image-size", stream.image_size, "Synthetic frame size");
    stream_cmd->add_option("--cut-threshold", stream.pipeline.cut_threshold, "Mean absolute difference for a cut");
    stream_cmd->add_option("--motion-cutoff", stream.pipeline.motion_cutoff, "Drop shots with more motion");
    stream_cmd->add_option("--stride", stream.pipeline.stride, "Frame sampling stride inside a shot");
    stream_cmd->add_option("--min-aesthetic", stream.pipeline.thresholds.aesthetic, "Aesthetic threshold");
    stream_cmd->add_option("--min-quality", stream.pipeline.thresholds.quality, "Quality threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen_cmd->parsed()) return run_gen_data(common, gen);
        if (train_cmd->parsed()) return run_train(common, train);
        if (sample_cmd->parsed()) return run_sample(common, sample);
        if (eval_cmd->parsed()) return run_eval(common, eval);
        if (mask_cmd->parsed()) return run_inspect_mask(common, lengths);
        if (stream_cmd->parsed()) return run_curate_stream(common, stream);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
