// SPDX-License-Identifier: Apache-2.0
#include "nextshot/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "nextshot/ham.hpp"
#include "nextshot/rng.hpp"
#include "nextshot/tensor_io.hpp"

namespace nextshot {

// ---------------------------------------------------------------------------
// Patch latents
// ---------------------------------------------------------------------------

Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw std::invalid_argument("patchify: expected an h x w x 3 image, got " + image.shape_string());
    }
    const std::size_t h = image.dim(0);
    const std::size_t w = image.dim(1);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("patchify: image " + image.shape_string() + " not divisible by patch " +
                                    std::to_string(patch));
    }
    const std::size_t gh = h / patch;
    const std::size_t gw = w / patch;
    Tensor out = Tensor::matrix(gh * gw, 3 * patch * patch);
    for (std::size_t pr = 0; pr < gh; ++pr) {
        for (std::size_t pc = 0; pc < gw; ++pc) {
            float* dst = out.row(pr * gw + pc).data();
            for (std::size_t r = 0; r < patch; ++r) {
                const float* src = image.data() + ((pr * patch + r) * w + pc * patch) * 3;
                std::memcpy(dst + r * patch * 3, src, patch * 3 * sizeof(float));
            }
        }
    }
    return out;
}

Tensor unpatchify(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t patch) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw std::invalid_argument("unpatchify: " + std::to_string(height) + "x" + std::to_string(width) +
                                    " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t gh = height / patch;
    const std::size_t gw = width / patch;
    if (tokens.rank() != 2 || tokens.rows() != gh * gw || tokens.cols() != 3 * patch * patch) {
        throw std::invalid_argument("unpatchify: tokens " + tokens.shape_string() + " do not match image size");
    }
    Tensor img({height, width, 3});
    for (std::size_t pr = 0; pr < gh; ++pr) {
        for (std::size_t pc = 0; pc < gw; ++pc) {
            const float* src = tokens.row(pr * gw + pc).data();
            for (std::size_t r = 0; r < patch; ++r) {
                float* dst = img.data() + ((pr * patch + r) * width + pc * patch) * 3;
                std::memcpy(dst, src + r * patch * 3, patch * 3 * sizeof(float));
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Dense helpers. All accumulate in double in a fixed order.
// ---------------------------------------------------------------------------

namespace {

// y[i][o] = sum_k x[i][k] w[o][k]
Tensor mul_nt(const Tensor& x, const Tensor& w) {
    if (w.cols() != x.cols()) {
        throw std::invalid_argument("linear: input " + x.shape_string() + " does not match weight " +
                                    w.shape_string());
    }
    const Tensor wt = transpose(w);
    Tensor y = Tensor::matrix(x.rows(), w.rows());
    gemm(x.data(), wt.data(), y.data(), x.rows(), x.cols(), w.rows());
    return y;
}

// dst[p x q] += scale * a^T b, with a: n x p, b: n x q.
void add_tn(Tensor& dst, const Tensor& a, const Tensor& b, double scale = 1.0) {
    const Tensor at = transpose(a);
    Tensor prod = Tensor::matrix(a.cols(), b.cols());
    gemm(at.data(), b.data(), prod.data(), a.cols(), a.rows(), b.cols());
    for (std::size_t i = 0; i < prod.size(); ++i) dst[i] += static_cast<float>(scale * prod[i]);
}

void add_colsum(Tensor& dst, const Tensor& a) {
    const std::size_t n = a.rows();
    const std::size_t q = a.cols();
    for (std::size_t c = 0; c < q; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a(i, c);
        dst[c] += static_cast<float>(s);
    }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

// y = x W^T + s (x A^T) B^T; `u` receives x A^T when adapted.
Tensor linear_forward(const LinearRef& l, const Tensor& x, Tensor* u) {
    Tensor y = mul_nt(x, *l.w);
    if (l.a != nullptr) {
        Tensor ux = mul_nt(x, *l.a);
        Tensor d = mul_nt(ux, *l.b);
        add_inplace(y, d, l.scale);
        if (u) *u = std::move(ux);
    }
    return y;
}

// Returns dx; accumulates adapter gradients when the targets are non-null.
Tensor linear_backward(const LinearRef& l, const Tensor& x, const Tensor& u, const Tensor& dy, Tensor* da,
                       Tensor* db, bool need_dx = true) {
    Tensor dx;
    if (need_dx) dx = matmul(dy, *l.w);
    if (l.a != nullptr) {
        Tensor dyb = matmul(dy, *l.b);  // n x r
        if (need_dx) {
            Tensor t = matmul(dyb, *l.a);
            add_inplace(dx, t, l.scale);
        }
        if (db) add_tn(*db, dy, u, l.scale);
        if (da) add_tn(*da, dyb, x, l.scale);
    }
    return dx;
}

struct RowMap {
    std::size_t batch = 0;
    std::size_t n = 0;
    std::size_t segs = 0;              // present segments per sample
    std::vector<std::size_t> seg_pos;  // token -> position among present segments

    std::size_t mod_row(std::size_t r) const { return (r / n) * segs + seg_pos[r % n]; }
};

RowMap row_map(const SegmentLayout& layout, std::size_t batch) {
    RowMap m;
    m.batch = batch;
    m.n = layout.total();
    const auto segs = layout.segments();
    m.segs = segs.size();
    m.seg_pos.resize(m.n);
    for (std::size_t si = 0; si < segs.size(); ++si) {
        for (std::size_t i = layout.offset(segs[si]); i < layout.end(segs[si]); ++i) m.seg_pos[i] = si;
    }
    return m;
}

// y * (1 + mods[scale]) + mods[shift], per row through the row map.
Tensor modulate(const Tensor& y, const Tensor& mods, const RowMap& rm, std::size_t shift_col,
                std::size_t scale_col) {
    const std::size_t d = y.cols();
    Tensor a = Tensor::matrix(y.rows(), d);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const float* m = mods.data() + rm.mod_row(r) * mods.cols();
        const float* yr = y.data() + r * d;
        float* ar = a.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) ar[j] = yr[j] * (1.0F + m[scale_col + j]) + m[shift_col + j];
    }
    return a;
}

void gated_residual(Tensor& x, const Tensor& delta, const Tensor& mods, const RowMap& rm, std::size_t gate_col) {
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const float* g = mods.data() + rm.mod_row(r) * mods.cols() + gate_col;
        float* xr = x.data() + r * d;
        const float* dr = delta.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) xr[j] += g[j] * dr[j];
    }
}

struct BlockCache {
    Tensor y1, a1, qkv, uq, att, ua, ao, x1;
    Tensor y2, a2, hpre, umi, g, umo, m2;
    std::vector<float> inv1, inv2;
    std::vector<std::vector<float>> probs;  // per (sample, head)
    Tensor mods;
};

Tensor block_apply(const Tensor& x, const RowMap& rm, const Tensor& mods, const BlockWeightsView& w,
                   std::span<const KeyRanges> ranges, BlockCache* c) {
    const std::size_t d = x.cols();
    const std::size_t heads = w.heads;
    const std::size_t dh = d / heads;
    const std::size_t n = rm.n;

    std::vector<float> inv1;
    Tensor y1 = layer_norm(x, &inv1);
    Tensor a1 = modulate(y1, mods, rm, 0, d);
    Tensor uq;
    Tensor qkv = linear_forward(w.qkv, a1, &uq);
    Tensor att = Tensor::matrix(x.rows(), d);
    std::vector<std::vector<float>> probs;
    if (c) probs.resize(rm.batch * heads);
    for (std::size_t b = 0; b < rm.batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const float* q = qkv.data() + b * n * 3 * d + h * dh;
            attention_head(q, q + d, q + 2 * d, 3 * d, dh, ranges, att.data() + b * n * d + h * dh, d,
                           c ? &probs[b * heads + h] : nullptr);
        }
    }
    Tensor ua;
    Tensor ao = linear_forward(w.attn_out, att, &ua);
    Tensor x1 = x;
    gated_residual(x1, ao, mods, rm, 2 * d);

    std::vector<float> inv2;
    Tensor y2 = layer_norm(x1, &inv2);
    Tensor a2 = modulate(y2, mods, rm, 3 * d, 4 * d);
    Tensor umi;
    Tensor hpre = linear_forward(w.mlp_in, a2, &umi);
    Tensor g = hpre;
    for (float& v : g.values()) v = gelu(v);
    Tensor umo;
    Tensor m2 = linear_forward(w.mlp_out, g, &umo);
    Tensor x2 = x1;
    gated_residual(x2, m2, mods, rm, 5 * d);

    if (c) {
        *c = BlockCache{std::move(y1), std::move(a1), std::move(qkv), std::move(uq), std::move(att),
                        std::move(ua), std::move(ao), std::move(x1), std::move(y2), std::move(a2),
                        std::move(hpre), std::move(umi), std::move(g), std::move(umo), std::move(m2),
                        std::move(inv1), std::move(inv2), std::move(probs), mods};
    }
    return x2;
}

struct LinearGrads {
    Tensor* a = nullptr;
    Tensor* b = nullptr;
};

struct BlockGrads {
    LinearGrads qkv, attn_out, mlp_in, mlp_out;
};

// Backward of the modulate step: returns dy, accumulates shift/scale grads.
Tensor modulate_backward(const Tensor& y, const Tensor& da, const Tensor& mods, const RowMap& rm,
                         std::size_t shift_col, std::size_t scale_col, std::vector<double>& dmods) {
    const std::size_t d = y.cols();
    const std::size_t mw = mods.cols();
    Tensor dy = Tensor::matrix(y.rows(), d);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const std::size_t mr = rm.mod_row(r);
        const float* m = mods.data() + mr * mw;
        double* dm = dmods.data() + mr * mw;
        const float* yr = y.data() + r * d;
        const float* gr = da.data() + r * d;
        float* out = dy.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            out[j] = gr[j] * (1.0F + m[scale_col + j]);
            dm[scale_col + j] += static_cast<double>(gr[j]) * yr[j];
            dm[shift_col + j] += gr[j];
        }
    }
    return dy;
}

// d(x + gate * delta): returns d delta, accumulates gate grads.
Tensor gate_backward(const Tensor& dx, const Tensor& delta, const Tensor& mods, const RowMap& rm,
                     std::size_t gate_col, std::vector<double>& dmods) {
    const std::size_t d = dx.cols();
    const std::size_t mw = mods.cols();
    Tensor dd = Tensor::matrix(dx.rows(), d);
    for (std::size_t r = 0; r < dx.rows(); ++r) {
        const std::size_t mr = rm.mod_row(r);
        const float* g = mods.data() + mr * mw + gate_col;
        double* dg = dmods.data() + mr * mw + gate_col;
        const float* gr = dx.data() + r * d;
        const float* dl = delta.data() + r * d;
        float* out = dd.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            out[j] = gr[j] * g[j];
            dg[j] += static_cast<double>(gr[j]) * dl[j];
        }
    }
    return dd;
}

Tensor attention_backward(const BlockCache& c, const Tensor& datt, const RowMap& rm, std::size_t heads,
                          std::span<const KeyRanges> ranges) {
    const std::size_t d = datt.cols();
    const std::size_t dh = d / heads;
    const std::size_t n = rm.n;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor dqkv = Tensor::matrix(c.qkv.rows(), 3 * d);
    std::vector<double> dq(n * dh), dk(n * dh), dv(n * dh);
    std::vector<double> qd(n * dh), kd(n * dh), vd(n * dh), gd(n * dh);
    std::vector<double> dp;
    for (std::size_t b = 0; b < rm.batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const float* q = c.qkv.data() + b * n * 3 * d + h * dh;
            const float* go = datt.data() + b * n * d + h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t e = 0; e < dh; ++e) {
                    qd[i * dh + e] = q[i * 3 * d + e];
                    kd[i * dh + e] = q[i * 3 * d + d + e];
                    vd[i * dh + e] = q[i * 3 * d + 2 * d + e];
                    gd[i * dh + e] = go[i * d + e];
                }
            }
            const std::vector<float>& p = c.probs[b * heads + h];
            std::fill(dq.begin(), dq.end(), 0.0);
            std::fill(dk.begin(), dk.end(), 0.0);
            std::fill(dv.begin(), dv.end(), 0.0);
            std::size_t idx = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* gi = gd.data() + i * dh;
                const double* qi = qd.data() + i * dh;
                dp.clear();
                double pdp = 0.0;
                std::size_t j_idx = idx;
                for (const KeyRange& r : ranges[i]) {
                    for (std::size_t j = r.begin; j < r.end; ++j, ++j_idx) {
                        const double s = dot(gi, vd.data() + j * dh, dh);
                        dp.push_back(s);
                        pdp += p[j_idx] * s;
                    }
                }
                std::size_t m = 0;
                double* dqi = dq.data() + i * dh;
                for (const KeyRange& r : ranges[i]) {
                    for (std::size_t j = r.begin; j < r.end; ++j, ++m) {
                        const double pij = p[idx + m];
                        const double ds = pij * (dp[m] - pdp) * scale;
                        const double* kj = kd.data() + j * dh;
                        double* dkj = dk.data() + j * dh;
                        double* dvj = dv.data() + j * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dqi[e] += ds * kj[e];
                            dkj[e] += ds * qi[e];
                            dvj[e] += pij * gi[e];
                        }
                    }
                }
                idx += m;
            }
            for (std::size_t i = 0; i < n; ++i) {
                float* row = dqkv.data() + (b * n + i) * 3 * d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                    row[e] = static_cast<float>(dq[i * dh + e]);
                    row[d + e] = static_cast<float>(dk[i * dh + e]);
                    row[2 * d + e] = static_cast<float>(dv[i * dh + e]);
                }
            }
        }
    }
    return dqkv;
}

Tensor block_backward(const BlockCache& c, const Tensor& dx2, const RowMap& rm, const BlockWeightsView& w,
                      std::span<const KeyRanges> ranges, const BlockGrads& gr, std::vector<double>& dmods) {
    const std::size_t d = dx2.cols();
    const Tensor& mods = c.mods;

    Tensor dx1 = dx2;
    Tensor dm2 = gate_backward(dx2, c.m2, mods, rm, 5 * d, dmods);
    Tensor dg = linear_backward(w.mlp_out, c.g, c.umo, dm2, gr.mlp_out.a, gr.mlp_out.b);
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= gelu_grad(c.hpre[i]);
    Tensor da2 = linear_backward(w.mlp_in, c.a2, c.umi, dg, gr.mlp_in.a, gr.mlp_in.b);
    Tensor dy2 = modulate_backward(c.y2, da2, mods, rm, 3 * d, 4 * d, dmods);
    add_inplace(dx1, layer_norm_backward(c.y2, c.inv2, dy2));

    Tensor dao = gate_backward(dx1, c.ao, mods, rm, 2 * d, dmods);
    Tensor datt = linear_backward(w.attn_out, c.att, c.ua, dao, gr.attn_out.a, gr.attn_out.b);
    Tensor dqkv = attention_backward(c, datt, rm, w.heads, ranges);
    Tensor da1 = linear_backward(w.qkv, c.a1, c.uq, dqkv, gr.qkv.a, gr.qkv.b);
    Tensor dy1 = modulate_backward(c.y1, da1, mods, rm, 0, d, dmods);
    Tensor dx = std::move(dx1);
    add_inplace(dx, layer_norm_backward(c.y1, c.inv1, dy1));
    return dx;
}

Tensor to_float(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
    Tensor t = Tensor::matrix(rows, cols);
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

Tensor lora_apply(const Tensor& w, const LoraAdapter& adapter, const Tensor& x) {
    const std::size_t in = x.size();
    if (w.rank() != 2 || w.cols() != in) {
        throw std::invalid_argument("lora_apply: weight " + w.shape_string() + " does not accept input of size " +
                                    std::to_string(in));
    }
    if (adapter.a.rank() != 2 || adapter.b.rank() != 2 || adapter.a.cols() != in ||
        adapter.b.rows() != w.rows() || adapter.b.cols() != adapter.a.rows() || adapter.a.rows() == 0) {
        throw std::invalid_argument("lora_apply: adapter A " + adapter.a.shape_string() + " / B " +
                                    adapter.b.shape_string() + " rank mismatch for weight " + w.shape_string());
    }
    Tensor xr = x;
    xr.reshape({1, in});
    LinearRef ref{&w, &adapter.a, &adapter.b, adapter.scale()};
    Tensor y = linear_forward(ref, xr, nullptr);
    y.reshape({w.rows()});
    return y;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

std::string_view to_string(Projection p) noexcept {
    switch (p) {
        case Projection::PatchIn: return "patch_in";
        case Projection::Qkv: return "qkv";
        case Projection::AttnOut: return "attn_out";
        case Projection::MlpIn: return "mlp_in";
        case Projection::MlpOut: return "mlp_out";
        case Projection::OutProj: return "out_proj";
    }
    return "?";
}

SegmentLayout ModelConfig::layout() const {
    const std::size_t p = tokens_per_image();
    return with_rel ? SegmentLayout::build(len_rel, len_ind, len_ind, p, p)
                    : SegmentLayout::without_rel(len_ind, len_ind, p, p);
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (patch == 0 || image_size == 0 || image_size % patch != 0) {
        fail("image size " + std::to_string(image_size) + " not divisible by patch " + std::to_string(patch));
    }
    if (heads == 0 || width % heads != 0) {
        fail("width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
    }
    if (width % 4 != 0) fail("width must be a multiple of 4");
    if (lora_rank == 0) fail("LoRA rank must be >= 1");
    if (mlp_ratio == 0) fail("mlp ratio must be >= 1");
    if (vocab == 0) fail("vocabulary is empty");
    if (len_ind == 0 || (with_rel && len_rel == 0)) fail("prompt segment lengths must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json adapted_json = nlohmann::json::object();
    for (std::size_t i = 0; i < kProjectionCount; ++i) {
        adapted_json[std::string(to_string(static_cast<Projection>(i)))] = adapted[i];
    }
    return {{"image_size", image_size}, {"patch", patch},         {"width", width},
            {"heads", heads},           {"blocks", blocks},       {"mlp_ratio", mlp_ratio},
            {"lora_rank", lora_rank},   {"lora_alpha", lora_alpha}, {"len_rel", len_rel},
            {"len_ind", len_ind},       {"vocab", vocab},         {"with_rel", with_rel},
            {"train_adaln", train_adaln}, {"train_embeddings", train_embeddings}, {"adapted", adapted_json}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.patch = j.value("patch", c.patch);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    c.len_rel = j.value("len_rel", c.len_rel);
    c.len_ind = j.value("len_ind", c.len_ind);
    c.vocab = j.value("vocab", c.vocab);
    c.with_rel = j.value("with_rel", c.with_rel);
    c.train_adaln = j.value("train_adaln", c.train_adaln);
    c.train_embeddings = j.value("train_embeddings", c.train_embeddings);
    if (j.contains("adapted")) {
        const auto& a = j.at("adapted");
        for (std::size_t i = 0; i < kProjectionCount; ++i) {
            const std::string key(to_string(static_cast<Projection>(i)));
            c.adapted[i] = a.value(key, c.adapted[i]);
        }
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::desk(std::size_t vocab) {
    ModelConfig c;
    c.vocab = vocab;
    return c;
}

ModelConfig ModelConfig::tiny(std::size_t vocab) {
    ModelConfig c;
    c.image_size = 16;
    c.width = 16;
    c.heads = 2;
    c.blocks = 2;
    c.mlp_ratio = 2;
    c.lora_rank = 4;
    c.lora_alpha = 8.0F;
    c.vocab = vocab;
    return c;
}

ModelConfig ModelConfig::small(std::size_t vocab) {
    ModelConfig c;
    c.image_size = 16;
    c.width = 64;
    c.heads = 4;
    c.blocks = 2;
    c.mlp_ratio = 2;
    c.lora_rank = 16;
    c.lora_alpha = 32.0F;
    c.vocab = vocab;
    return c;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

std::size_t ParamStore::add(std::string name, Tensor value, bool trainable) {
    if (find(name) != kNoSlot) throw std::invalid_argument("duplicate parameter '" + name + "'");
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    trainable_.push_back(trainable);
    return values_.size() - 1;
}

std::size_t ParamStore::find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return i;
    }
    return kNoSlot;
}

std::size_t ParamStore::trainable_count() const noexcept {
    std::size_t n = 0;
    for (bool t : trainable_) n += t ? 1 : 0;
    return n;
}

// ---------------------------------------------------------------------------
// Block-level API
// ---------------------------------------------------------------------------

float gelu(float x) noexcept {
    constexpr float k = 0.7978845608028654F;  // sqrt(2 / pi)
    const float inner = k * (x + 0.044715F * x * x * x);
    return 0.5F * x * (1.0F + std::tanh(inner));
}

float gelu_grad(float x) noexcept {
    constexpr float k = 0.7978845608028654F;
    const float inner = k * (x + 0.044715F * x * x * x);
    const float th = std::tanh(inner);
    return 0.5F * (1.0F + th) + 0.5F * x * (1.0F - th * th) * k * (1.0F + 3.0F * 0.044715F * x * x);
}

Tensor block_forward(const Tensor& x, const SegmentLayout& layout, const Tensor& mask, const ModulationSet& mods,
                     const BlockWeightsView& weights) {
    if (x.rank() != 2 || x.rows() != layout.total()) {
        throw std::invalid_argument("block_forward: tokens " + x.shape_string() + " do not match layout total " +
                                    std::to_string(layout.total()));
    }
    const std::size_t d = x.cols();
    if (weights.heads == 0 || d % weights.heads != 0) {
        throw std::invalid_argument("block_forward: width not divisible by head count");
    }
    const auto segs = layout.segments();
    Tensor m = Tensor::matrix(segs.size(), 6 * d);
    for (std::size_t si = 0; si < segs.size(); ++si) {
        const auto& e = mods[index_of(segs[si])];
        if (!e) {
            throw std::invalid_argument("block_forward: missing modulation entry for segment " +
                                        std::string(to_string(segs[si])));
        }
        const Tensor* parts[6] = {&e->shift_attn, &e->scale_attn, &e->gate_attn,
                                  &e->shift_mlp,  &e->scale_mlp,  &e->gate_mlp};
        for (std::size_t p = 0; p < 6; ++p) {
            if (parts[p]->size() != d) throw std::invalid_argument("block_forward: modulation width mismatch");
            std::memcpy(m.data() + si * 6 * d + p * d, parts[p]->data(), d * sizeof(float));
        }
    }
    const auto ranges = key_ranges_from_mask(mask);
    return block_apply(x, row_map(layout, 1), m, weights, ranges, nullptr);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ForwardCache {
    std::size_t batch = 0;
    CaciPlan plan;
    Tensor x0;                              // pre-positional embeddings
    std::vector<SegmentKind> context_rows;  // context source of each conditioner row
    ConditionerCache cond;
    Tensor sc;
    std::vector<BlockCache> blocks;
    Tensor yf, af, uo, fmods;
    std::vector<float> invf;
};

ForwardState::ForwardState() : cache_(std::make_unique<ForwardCache>()) {}
ForwardState::~ForwardState() = default;
ForwardState::ForwardState(ForwardState&&) noexcept = default;
ForwardState& ForwardState::operator=(ForwardState&&) noexcept = default;

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), layout_(config.layout()) {
    config_.validate();
    init_params(seed);
}

void Model::init_params(std::uint64_t seed) {
    const Rng root(seed);
    const std::size_t d = config_.width;
    const std::size_t lw = config_.latent_width();
    const bool emb = config_.train_embeddings;
    const bool ada = config_.train_adaln;

    auto normal = [&](const std::string& name, std::vector<std::size_t> shape, float stddev) {
        Tensor t(std::move(shape));
        Rng r = root.split(name);
        r.fill_normal(t, stddev);
        return t;
    };
    auto linear = [&](const std::string& name, Projection p, std::size_t out, std::size_t in) {
        LinearSlot s;
        const float sd = 1.0F / std::sqrt(static_cast<float>(in));
        s.base = params_.add(name + ".w", normal(name + ".w", {out, in}, sd), false);
        if (config_.adapted[static_cast<std::size_t>(p)]) {
            const std::size_t r = config_.lora_rank;
            s.lora_a = params_.add(name + ".lora_a", normal(name + ".lora_a", {r, in}, sd), true);
            s.lora_b = params_.add(name + ".lora_b", Tensor::matrix(out, r), true);
        }
        return s;
    };

    prompt_table_ = params_.add("prompt_table", normal("prompt_table", {config_.vocab, d}, 1.0F), emb);

    // Text slots start random; both visual segments start from the same 2D
    // sincos grid pattern and then learn independently.
    Tensor pos = normal("pos_table", {layout_.total(), d}, 0.1F);
    const std::size_t grid = config_.image_size / config_.patch;
    const std::size_t quarter = d / 4;
    for (SegmentKind s : {SegmentKind::VisCond, SegmentKind::VisTgt}) {
        for (std::size_t i = 0; i < layout_.length(s); ++i) {
            const double gr = static_cast<double>(i / grid);
            const double gc = static_cast<double>(i % grid);
            float* row = pos.row(layout_.offset(s) + i).data();
            for (std::size_t f = 0; f < quarter; ++f) {
                const double w = std::pow(10000.0, -static_cast<double>(f) / static_cast<double>(quarter));
                row[f] = static_cast<float>(std::sin(gr * w));
                row[quarter + f] = static_cast<float>(std::cos(gr * w));
                row[2 * quarter + f] = static_cast<float>(std::sin(gc * w));
                row[3 * quarter + f] = static_cast<float>(std::cos(gc * w));
            }
        }
    }
    pos_table_ = params_.add("pos_table", std::move(pos), emb);

    patch_in_ = linear("patch_in", Projection::PatchIn, d, lw);

    const float sd = 1.0F / std::sqrt(static_cast<float>(d));
    cond_w1_ = params_.add("cond.w1", normal("cond.w1", {d, d}, sd), ada);
    cond_b1_ = params_.add("cond.b1", Tensor::vector(d), ada);
    cond_w2_ = params_.add("cond.w2", normal("cond.w2", {d, d}, sd), ada);
    cond_b2_ = params_.add("cond.b2", Tensor::vector(d), ada);

    const std::size_t hidden = config_.mlp_hidden();
    blocks_.resize(config_.blocks);
    for (std::size_t k = 0; k < config_.blocks; ++k) {
        const std::string p = "block" + std::to_string(k);
        BlockSlots& b = blocks_[k];
        b.qkv = linear(p + ".qkv", Projection::Qkv, 3 * d, d);
        b.attn_out = linear(p + ".attn_out", Projection::AttnOut, d, d);
        b.mlp_in = linear(p + ".mlp_in", Projection::MlpIn, hidden, d);
        b.mlp_out = linear(p + ".mlp_out", Projection::MlpOut, d, hidden);
        b.mod_w = params_.add(p + ".mod.w", Tensor::matrix(6 * d, d), ada);
        b.mod_b = params_.add(p + ".mod.b", Tensor::vector(6 * d), ada);
    }
    final_w_ = params_.add("final.mod.w", Tensor::matrix(2 * d, d), ada);
    final_b_ = params_.add("final.mod.b", Tensor::vector(2 * d), ada);
    out_proj_ = linear("out_proj", Projection::OutProj, lw, d);
}

LinearRef Model::linear(const LinearSlot& slot) const {
    LinearRef r;
    r.w = &params_[slot.base];
    if (slot.adapted()) {
        r.a = &params_[slot.lora_a];
        r.b = &params_[slot.lora_b];
        r.scale = config_.lora_alpha / static_cast<float>(config_.lora_rank);
    }
    return r;
}

BlockWeightsView Model::block_weights(std::size_t block) const {
    const BlockSlots& b = blocks_.at(block);
    return {linear(b.qkv), linear(b.attn_out), linear(b.mlp_in), linear(b.mlp_out), config_.heads};
}

ModelInput Model::embed(const PromptCodes& prompts, const Tensor& z_cond, const Tensor& z_t, float t) const {
    const std::size_t d = config_.width;
    const std::size_t p = config_.tokens_per_image();
    const std::size_t lw = config_.latent_width();
    if (z_cond.rank() != 2 || z_cond.rows() != p || z_cond.cols() != lw || z_t.rank() != 2 || z_t.rows() != p ||
        z_t.cols() != lw) {
        throw std::invalid_argument("embed: latents " + z_cond.shape_string() + " / " + z_t.shape_string() +
                                    " do not match " + std::to_string(p) + "x" + std::to_string(lw));
    }
    const Tensor& table = params_[prompt_table_];
    auto lookup = [&](const std::vector<std::int32_t>& codes, std::size_t len, std::string_view what) {
        if (codes.size() != len) {
            throw std::invalid_argument("embed: " + std::string(what) + " prompt has " +
                                        std::to_string(codes.size()) + " codes, expected " + std::to_string(len));
        }
        Tensor e = Tensor::matrix(len, d);
        for (std::size_t i = 0; i < len; ++i) {
            const auto c = codes[i];
            if (c < 0 || static_cast<std::size_t>(c) >= config_.vocab) {
                throw std::invalid_argument("embed: prompt code " + std::to_string(c) + " outside vocabulary");
            }
            std::memcpy(e.row(i).data(), table.row(static_cast<std::size_t>(c)).data(), d * sizeof(float));
        }
        return e;
    };
    const LinearRef pin = linear(patch_in_);
    Tensor ic = lookup(prompts.ind_cond, config_.len_ind, "ind_cond");
    Tensor it = lookup(prompts.ind_tgt, config_.len_ind, "ind_tgt");
    Tensor vc = linear_forward(pin, z_cond, nullptr);
    Tensor vt = linear_forward(pin, z_t, nullptr);
    if (config_.with_rel) {
        Tensor rel = lookup(prompts.rel, config_.len_rel, "rel");
        return concat_model_input(rel, ic, it, vc, vt, t);
    }
    return concat_model_input_without_rel(ic, it, vc, vt, t);
}

PooledPrompts Model::pooled_prompts(const ModelInput& input) const {
    PooledPrompts pooled;
    for (SegmentKind s : input.layout.segments()) {
        if (is_text(s)) pooled[index_of(s)] = pool_prompt(extract_segment(input, s));
    }
    return pooled;
}

ModulationEntry Model::modulation(std::size_t block, const CaciPlan& plan, SegmentKind seg, float t,
                                  const PooledPrompts& pooled) const {
    const BlockSlots& b = blocks_.at(block);
    const ConditionerWeights cw{params_[cond_w1_], params_[cond_b1_], params_[cond_w2_], params_[cond_b2_]};
    const ModulationWeights mw{params_[b.mod_w], params_[b.mod_b]};
    return modulation_for(plan, seg, t, pooled, cw, mw);
}

Tensor Model::run(const Tensor& x0, const std::vector<float>& t, std::size_t batch, const CaciPlan& plan,
                  ForwardCache* cache) const {
    const std::size_t d = config_.width;
    const std::size_t n = layout_.total();
    const RowMap rm = row_map(layout_, batch);
    const auto segs = layout_.segments();
    const auto& ranges = ham_key_ranges(layout_);

    // Conditioning rows: one per (sample, present segment).
    Tensor u = Tensor::matrix(batch * segs.size(), d);
    std::vector<SegmentKind> ctx_rows;
    ctx_rows.reserve(u.rows());
    for (std::size_t b = 0; b < batch; ++b) {
        PooledPrompts pooled;
        for (SegmentKind s : segs) {
            if (is_text(s)) pooled[index_of(s)] = pool_prompt(x0.slice_rows(b * n + layout_.offset(s), layout_.length(s)));
        }
        for (std::size_t si = 0; si < segs.size(); ++si) {
            const Tensor ui = conditioning_input(plan, segs[si], t[b], pooled);
            std::memcpy(u.row(b * segs.size() + si).data(), ui.data(), d * sizeof(float));
            ctx_rows.push_back(plan.at(segs[si]).context);
        }
    }
    const ConditionerWeights cw{params_[cond_w1_], params_[cond_b1_], params_[cond_w2_], params_[cond_b2_]};
    ConditionerCache ccache;
    Tensor sc = conditioner_forward(u, cw, cache ? &ccache : nullptr);

    Tensor x = x0;
    const Tensor& pos = params_[pos_table_];
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < n * d; ++i) x[b * n * d + i] += pos[i];
    }

    if (cache) cache->blocks.resize(blocks_.size());
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const Tensor mods = modulation_rows(sc, params_[blocks_[k].mod_w], params_[blocks_[k].mod_b]);
        x = block_apply(x, rm, mods, block_weights(k), ranges, cache ? &cache->blocks[k] : nullptr);
    }

    Tensor fmods = modulation_rows(sc, params_[final_w_], params_[final_b_]);
    std::vector<float> invf;
    Tensor yf = layer_norm(x, &invf);
    Tensor af = modulate(yf, fmods, rm, 0, d);
    Tensor uo;
    Tensor out = linear_forward(linear(out_proj_), af, &uo);

    if (cache) {
        cache->batch = batch;
        cache->plan = plan;
        cache->x0 = x0;
        cache->context_rows = std::move(ctx_rows);
        cache->cond = std::move(ccache);
        cache->sc = std::move(sc);
        cache->yf = std::move(yf);
        cache->af = std::move(af);
        cache->uo = std::move(uo);
        cache->fmods = std::move(fmods);
        cache->invf = std::move(invf);
    }
    return out;
}

Tensor Model::model_forward(const ModelInput& input, const CaciPlan& plan) const {
    if (!(input.layout == layout_)) throw std::invalid_argument("model_forward: input layout does not match model");
    if (input.tokens.rank() != 2 || input.tokens.cols() != config_.width) {
        throw std::invalid_argument("model_forward: token width must be " + std::to_string(config_.width));
    }
    return run(input.tokens, {input.diffusion_t}, 1, plan, nullptr);
}

Tensor Model::forward(const ModelBatch& batch, const CaciPlan& plan, ForwardState* state) const {
    const std::size_t bsz = batch.size();
    const std::size_t p = config_.tokens_per_image();
    if (bsz == 0 || batch.prompts.size() != bsz) throw std::invalid_argument("forward: empty or ragged batch");
    if (batch.z_cond.rank() != 2 || batch.z_cond.rows() != bsz * p || batch.z_t.rank() != 2 ||
        batch.z_t.rows() != bsz * p) {
        throw std::invalid_argument("forward: latents must have " + std::to_string(bsz * p) + " rows");
    }
    const std::size_t n = layout_.total();
    const std::size_t d = config_.width;
    Tensor x0 = Tensor::matrix(bsz * n, d);
    for (std::size_t b = 0; b < bsz; ++b) {
        if (!(batch.t[b] >= 0.0F && batch.t[b] <= 1.0F)) throw std::invalid_argument("forward: t outside [0, 1]");
        const ModelInput in = embed(batch.prompts[b], batch.z_cond.slice_rows(b * p, p),
                                    batch.z_t.slice_rows(b * p, p), batch.t[b]);
        std::memcpy(x0.data() + b * n * d, in.tokens.data(), n * d * sizeof(float));
    }
    return run(x0, batch.t, bsz, plan, state ? state->get() : nullptr);
}

Gradients Model::backward(const ModelBatch& batch, const ForwardState& state, const Tensor& d_output) const {
    const ForwardCache& c = *state.get();
    const std::size_t bsz = c.batch;
    const std::size_t d = config_.width;
    const std::size_t n = layout_.total();
    const std::size_t p = config_.tokens_per_image();
    if (bsz == 0 || c.blocks.size() != blocks_.size()) throw std::invalid_argument("backward: no forward cache");
    if (d_output.rank() != 2 || d_output.rows() != bsz * n || d_output.cols() != config_.latent_width()) {
        throw std::invalid_argument("backward: output gradient " + d_output.shape_string() + " has wrong shape");
    }
    const RowMap rm = row_map(layout_, bsz);
    const auto segs = layout_.segments();
    const auto& ranges = ham_key_ranges(layout_);

    Gradients g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_.trainable(i)) g[i] = zeros_like(params_[i]);
    }
    auto grad = [&](std::size_t slot) -> Tensor* {
        return slot != kNoSlot && params_.trainable(slot) ? &g[slot] : nullptr;
    };
    auto lgrads = [&](const LinearSlot& s) { return LinearGrads{grad(s.lora_a), grad(s.lora_b)}; };

    // Final layer.
    Tensor daf = linear_backward(linear(out_proj_), c.af, c.uo, d_output, grad(out_proj_.lora_a),
                                 grad(out_proj_.lora_b));
    std::vector<double> dfm(c.fmods.size(), 0.0);
    Tensor dyf = modulate_backward(c.yf, daf, c.fmods, rm, 0, d, dfm);
    Tensor dx = layer_norm_backward(c.yf, c.invf, dyf);

    const std::size_t mrows = c.sc.rows();
    Tensor dsc = Tensor::matrix(mrows, d);
    auto mod_backward = [&](const std::vector<double>& dm, std::size_t width, std::size_t w_slot,
                            std::size_t b_slot) {
        const Tensor dmt = to_float(dm, mrows, width);
        if (Tensor* gw = grad(w_slot)) add_tn(*gw, dmt, c.sc);
        if (Tensor* gb = grad(b_slot)) add_colsum(*gb, dmt);
        add_inplace(dsc, matmul(dmt, params_[w_slot]));
    };
    mod_backward(dfm, 2 * d, final_w_, final_b_);

    for (std::size_t k = blocks_.size(); k-- > 0;) {
        const BlockSlots& s = blocks_[k];
        std::vector<double> dm(c.blocks[k].mods.size(), 0.0);
        const BlockGrads bg{lgrads(s.qkv), lgrads(s.attn_out), lgrads(s.mlp_in), lgrads(s.mlp_out)};
        dx = block_backward(c.blocks[k], dx, rm, block_weights(k), ranges, bg, dm);
        mod_backward(dm, 6 * d, s.mod_w, s.mod_b);
    }

    // Positional table receives the sum over the batch.
    Tensor& dx0 = dx;
    if (Tensor* gp = grad(pos_table_)) {
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t i = 0; i < n * d; ++i) (*gp)[i] += dx0[b * n * d + i];
        }
    }

    // Conditioner: sc = silu(c), c = W2 silu(h1) + b2, h1 = W1 u + b1.
    const ConditionerCache& cc = c.cond;
    Tensor dcv = dsc;
    for (std::size_t i = 0; i < dcv.size(); ++i) dcv[i] *= silu_grad(cc.c[i]);
    if (Tensor* gw = grad(cond_w2_)) add_tn(*gw, dcv, cc.a1);
    if (Tensor* gb = grad(cond_b2_)) add_colsum(*gb, dcv);
    Tensor dh1 = matmul(dcv, params_[cond_w2_]);
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] *= silu_grad(cc.h1[i]);
    if (Tensor* gw = grad(cond_w1_)) add_tn(*gw, dh1, cc.u);
    if (Tensor* gb = grad(cond_b1_)) add_colsum(*gb, dh1);
    Tensor du = matmul(dh1, params_[cond_w1_]);

    // Pooled context is the mean of pre-positional text embeddings: spread the
    // conditioning gradient back over that segment's rows.
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t si = 0; si < segs.size(); ++si) {
            const SegmentKind ctx = c.context_rows[b * segs.size() + si];
            const std::size_t len = layout_.length(ctx);
            const float inv = 1.0F / static_cast<float>(len);
            const float* dr = du.row(b * segs.size() + si).data();
            for (std::size_t i = 0; i < len; ++i) {
                float* row = dx0.row(b * n + layout_.offset(ctx) + i).data();
                for (std::size_t j = 0; j < d; ++j) row[j] += dr[j] * inv;
            }
        }
    }

    // Embeddings: text rows scatter into the prompt table, visual rows flow
    // into the patch projection adapter.
    if (Tensor* gt = grad(prompt_table_)) {
        for (std::size_t b = 0; b < bsz; ++b) {
            const PromptCodes& pc = batch.prompts[b];
            for (SegmentKind s : segs) {
                if (!is_text(s)) continue;
                const auto& codes = s == SegmentKind::Rel ? pc.rel : (s == SegmentKind::IndCond ? pc.ind_cond : pc.ind_tgt);
                for (std::size_t i = 0; i < codes.size(); ++i) {
                    float* trow = gt->row(static_cast<std::size_t>(codes[i])).data();
                    const float* dr = dx0.row(b * n + layout_.offset(s) + i).data();
                    for (std::size_t j = 0; j < d; ++j) trow[j] += dr[j];
                }
            }
        }
    }
    if (patch_in_.adapted() && (grad(patch_in_.lora_a) || grad(patch_in_.lora_b))) {
        const LinearRef pin = linear(patch_in_);
        Tensor z = Tensor::matrix(2 * bsz * p, config_.latent_width());
        Tensor dz = Tensor::matrix(2 * bsz * p, d);
        std::size_t r = 0;
        for (std::size_t b = 0; b < bsz; ++b) {
            for (const auto& [seg, src] : {std::pair{SegmentKind::VisCond, &batch.z_cond},
                                           std::pair{SegmentKind::VisTgt, &batch.z_t}}) {
                for (std::size_t i = 0; i < p; ++i, ++r) {
                    std::memcpy(z.row(r).data(), src->row(b * p + i).data(), z.cols() * sizeof(float));
                    std::memcpy(dz.row(r).data(), dx0.row(b * n + layout_.offset(seg) + i).data(), d * sizeof(float));
                }
            }
        }
        const Tensor u = mul_nt(z, *pin.a);
        linear_backward(pin, z, u, dz, grad(patch_in_.lora_a), grad(patch_in_.lora_b), false);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kCheckpointMagic = {'N', 'S', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    const ParamStore& ps = model.params();
    nlohmann::json header;
    header["config"] = model.config().to_json();
    header["layout"] = model.layout().to_json();
    nlohmann::json records = nlohmann::json::array();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        records.push_back({{"name", ps.name(i)}, {"trainable", ps.trainable(i)}});
    }
    header["records"] = records;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) write_tensor(os, ps[i]);
    if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kCheckpointMagic) throw std::runtime_error("not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!is || len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error("truncated checkpoint header: " + path.string());
    const auto header = nlohmann::json::parse(text);

    Model model(ModelConfig::from_json(header.at("config")), 0);
    ParamStore& ps = model.params();
    const auto& records = header.at("records");
    if (records.size() != ps.size()) throw std::runtime_error("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::string name = records[i].at("name").get<std::string>();
        if (name != ps.name(i)) throw std::runtime_error("checkpoint record " + name + " does not match " + ps.name(i));
        Tensor t = read_tensor(is);
        if (t.shape() != ps[i].shape()) {
            throw std::runtime_error("checkpoint tensor " + name + " has shape " + t.shape_string() + ", expected " +
                                     ps[i].shape_string());
        }
        ps[i] = std::move(t);
    }
    return model;
}

}  // namespace nextshot
