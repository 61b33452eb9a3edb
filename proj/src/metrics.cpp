// SPDX-License-Identifier: Apache-2.0
#include "nextshot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <limits>
#include <memory>
#include <stdexcept>

#include "linalg.hpp"
#include "nextshot/rng.hpp"

namespace nextshot {

namespace {

double sorted_mean(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("cosine: width mismatch (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("cosine: zero vector");
    return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double consistency(const ImageEmbedder& embedder, std::span<const Tensor> conds, std::span<const Tensor> gens) {
    if (conds.size() != gens.size()) throw std::invalid_argument("consistency: list lengths differ");
    if (conds.empty()) throw std::invalid_argument("consistency: empty lists");
    std::vector<double> v;
    v.reserve(conds.size());
    for (std::size_t i = 0; i < conds.size(); ++i) v.push_back(cosine(embedder.embed(conds[i]), embedder.embed(gens[i])));
    return sorted_mean(std::move(v));
}

double text_fidelity(const ImageEmbedder& image, const TextEmbedder& text, std::span<const Tensor> gens,
                     std::span<const HierarchicalPrompt> prompts) {
    if (gens.size() != prompts.size()) throw std::invalid_argument("text_fidelity: list lengths differ");
    if (gens.empty()) throw std::invalid_argument("text_fidelity: empty lists");
    if (image.dim != text.dim) {
        throw std::invalid_argument("text_fidelity: embedder widths differ (" + std::to_string(image.dim) + " vs " +
                                    std::to_string(text.dim) + ")");
    }
    std::vector<double> v;
    v.reserve(gens.size());
    for (std::size_t i = 0; i < gens.size(); ++i) {
        v.push_back(cosine(image.embed(gens[i]), text.embed(prompts[i].relational, prompts[i].tgt)));
    }
    return sorted_mean(std::move(v));
}

namespace {

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

Moments moments(std::vector<Embedding> set, std::size_t dim, double shrinkage) {
    std::sort(set.begin(), set.end());
    const auto n = static_cast<double>(set.size());
    Moments m{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim)),
              Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))};
    for (const Embedding& e : set) {
        for (std::size_t i = 0; i < dim; ++i) m.mean(static_cast<Eigen::Index>(i)) += e[i];
    }
    m.mean /= n;
    for (const Embedding& e : set) {
        const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(e.data(), static_cast<Eigen::Index>(dim)) - m.mean;
        m.cov.noalias() += c * c.transpose();
    }
    m.cov /= (n - 1.0);
    m.cov.diagonal().array() += shrinkage;
    return m;
}

}  // namespace

double fid(const std::vector<Embedding>& a, const std::vector<Embedding>& b, double shrinkage) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("fid: each set needs at least 2 embeddings");
    if (!(shrinkage >= 0.0)) throw std::invalid_argument("fid: shrinkage must be non-negative");
    const std::size_t dim = a.front().size();
    for (const auto* set : {&a, &b}) {
        for (const Embedding& e : *set) {
            if (e.size() != dim) throw std::invalid_argument("fid: embeddings of different widths");
        }
    }
    const Moments ma = moments(a, dim, shrinkage);
    const Moments mb = moments(b, dim, shrinkage);
    if (shrinkage == 0.0) {
        for (const Moments* m : {&ma, &mb}) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m->cov, Eigen::EigenvaluesOnly);
            if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff())) {
                throw std::invalid_argument("fid: covariance is singular; use shrinkage or more samples");
            }
        }
    }
    const Eigen::MatrixXd sa = detail::psd_sqrt(ma.cov);
    const Eigen::MatrixXd cross = sa * mb.cov * sa;
    const double tr_sqrt = detail::psd_sqrt(0.5 * (cross + cross.transpose())).trace();
    const double value = (ma.mean - mb.mean).squaredNorm() + ma.cov.trace() + mb.cov.trace() - 2.0 * tr_sqrt;
    if (value < 0.0) {
        if (value >= -1e-6) return 0.0;
        throw std::runtime_error("fid: negative distance " + std::to_string(value));
    }
    return value;
}

ImageEmbedder palette_embedder() {
    struct Chroma {
        double r, g, b;
    };
    auto refs = std::make_shared<std::vector<Chroma>>();
    for (const auto& c : reference_colors()) {
        const double s = static_cast<double>(c[0]) + c[1] + c[2];
        refs->push_back({c[0] / s, c[1] / s, c[2] / s});
    }
    const std::size_t dim = refs->size() + 1;
    ImageEmbedder e;
    e.name = "palette";
    e.dim = dim;
    e.embed = [refs, dim](const Tensor& img) {
        if (img.rank() != 3 || img.dim(2) != 3) throw std::invalid_argument("palette embedder: image must be H x W x 3");
        Embedding h(dim, 0.0);
        const std::size_t pixels = img.dim(0) * img.dim(1);
        for (std::size_t p = 0; p < pixels; ++p) {
            const double r = img[p * 3], g = img[p * 3 + 1], b = img[p * 3 + 2];
            const double s = r + g + b;
            if (s < 0.15) {
                h[dim - 1] += 1.0;
                continue;
            }
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < refs->size(); ++k) {
                const Chroma& c = (*refs)[k];
                const double d = std::pow(r / s - c.r, 2) + std::pow(g / s - c.g, 2) + std::pow(b / s - c.b, 2);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            h[best] += 1.0;
        }
        for (double& v : h) v /= static_cast<double>(pixels);
        return h;
    };
    return e;
}

ImageEmbedder projection_embedder(std::size_t image_size, std::size_t dim, std::uint64_t seed) {
    const std::size_t in = image_size * image_size * 3;
    auto w = std::make_shared<Tensor>(Tensor::matrix(dim, in));
    Rng rng = Rng(seed).split("projection-embedder");
    rng.fill_normal(*w, static_cast<float>(1.0 / std::sqrt(static_cast<double>(in))));
    ImageEmbedder e;
    e.name = "projection";
    e.dim = dim;
    e.embed = [w, dim, in](const Tensor& img) {
        if (img.size() != in) throw std::invalid_argument("projection embedder: image size does not match");
        Embedding out(dim, 0.0);
        for (std::size_t k = 0; k < dim; ++k) {
            const float* row = w->data() + k * in;
            double s = 0.0;
            for (std::size_t i = 0; i < in; ++i) s += static_cast<double>(row[i]) * (static_cast<double>(img[i]) - 0.5);
            out[k] = s;
        }
        return out;
    };
    return e;
}

TextEmbedder render_text_embedder(const ImageEmbedder& image, std::size_t image_size) {
    TextEmbedder t;
    t.name = "render+" + image.name;
    t.dim = image.dim;
    t.embed = [image, image_size](const RelationalPrompt& rel, const IndividualPrompt& ind) {
        return image.embed(render_scene(decode_scene(rel, ind), image_size));
    };
    return t;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    return {{"schema_version", kReportSchemaVersion},
            {"consistency_a", consistency_a},
            {"consistency_b", consistency_b},
            {"text_fidelity", text_fidelity},
            {"fid", fid},
            {"count", count},
            {"config_hash", config_hash},
            {"embedders", {{"a", embedder_a}, {"b", embedder_b}}}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
        throw std::invalid_argument("report schema version " + std::to_string(version) + " is not supported");
    }
    EvalReport r;
    r.consistency_a = j.at("consistency_a").get<double>();
    r.consistency_b = j.at("consistency_b").get<double>();
    r.text_fidelity = j.at("text_fidelity").get<double>();
    r.fid = j.at("fid").get<double>();
    r.count = j.at("count").get<std::size_t>();
    r.config_hash = j.value("config_hash", std::string());
    if (j.contains("embedders")) {
        r.embedder_a = j.at("embedders").value("a", std::string());
        r.embedder_b = j.at("embedders").value("b", std::string());
    }
    return r;
}

EvalReport evaluate(const std::vector<ShotPair>& generated, const std::vector<ShotPair>& ground_truth,
                    const ImageEmbedder& a, const ImageEmbedder& b, const TextEmbedder& text,
                    std::string config_hash) {
    std::map<std::uint64_t, const ShotPair*> gen, gt;
    for (const ShotPair& p : generated) {
        if (!gen.emplace(p.id, &p).second) throw std::invalid_argument("evaluate: duplicate generated id " + std::to_string(p.id));
    }
    for (const ShotPair& p : ground_truth) {
        if (!gt.emplace(p.id, &p).second) throw std::invalid_argument("evaluate: duplicate ground-truth id " + std::to_string(p.id));
    }
    std::string missing;
    for (const auto& [id, _] : gt) {
        if (!gen.count(id)) missing += (missing.empty() ? "" : ", ") + ("generated " + std::to_string(id));
    }
    for (const auto& [id, _] : gen) {
        if (!gt.count(id)) missing += (missing.empty() ? "" : ", ") + ("ground-truth " + std::to_string(id));
    }
    if (!missing.empty()) throw std::invalid_argument("evaluate: missing pairs: " + missing);
    if (gt.empty()) throw std::invalid_argument("evaluate: no pairs");

    std::vector<Tensor> conds, gens;
    std::vector<HierarchicalPrompt> prompts;
    std::vector<Embedding> gen_emb, gt_emb;
    for (const auto& [id, truth] : gt) {
        const ShotPair& g = *gen.at(id);
        conds.push_back(truth->cond);
        gens.push_back(g.tgt);
        prompts.push_back(truth->prompt);
        gen_emb.push_back(b.embed(g.tgt));
        gt_emb.push_back(b.embed(truth->tgt));
    }
    EvalReport r;
    r.consistency_a = consistency(a, conds, gens);
    r.consistency_b = consistency(b, conds, gens);
    r.text_fidelity = text_fidelity(b, text, gens, prompts);
    r.fid = fid(gen_emb, gt_emb);
    r.count = gt.size();
    r.config_hash = std::move(config_hash);
    r.embedder_a = a.name;
    r.embedder_b = b.name;
    return r;
}

std::string format_report_diff(const EvalReport& ours, const EvalReport& baseline, std::string_view ours_name,
                               std::string_view baseline_name) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-16s %12.*s %12.*s %10s\n", "metric", 12, std::string(ours_name).c_str(), 12,
                  std::string(baseline_name).c_str(), "delta");
    out += line;
    auto row = [&](const char* name, double a, double b, bool higher_better) {
        const double d = a - b;
        const bool better = higher_better ? d > 0.0 : d < 0.0;
        std::snprintf(line, sizeof(line), "%-16s %12.4f %12.4f %+10.4f%s\n", name, a, b, d,
                      d == 0.0 ? "" : (better ? "  better" : "  worse"));
        out += line;
    };
    row("consistency_a", ours.consistency_a, baseline.consistency_a, true);
    row("consistency_b", ours.consistency_b, baseline.consistency_b, true);
    row("text_fidelity", ours.text_fidelity, baseline.text_fidelity, true);
    row("fid", ours.fid, baseline.fid, false);
    return out;
}

}  // namespace nextshot
