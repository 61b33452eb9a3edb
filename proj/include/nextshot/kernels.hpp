// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nextshot/tensor.hpp"

namespace nextshot {

inline constexpr double kLayerNormEps = 1e-6;

// ---------------------------------------------------------------------------
// Dense products. Every output element accumulates in double, in ascending
// inner-index order, so results do not depend on call site or threading.
// ---------------------------------------------------------------------------

/// c[m x n] = a[m x k] * b[k x n]; when `accumulate`, adds into c instead.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Masked attention
// ---------------------------------------------------------------------------

/// Half-open key interval [begin, end).
struct KeyRange {
    std::size_t begin = 0;
    std::size_t end = 0;
};
/// Allowed keys of one query row as ascending, disjoint ranges.
using KeyRanges = std::vector<KeyRange>;

/// Dot product accumulated in four interleaved partial sums.
double dot(const double* a, const double* b, std::size_t n) noexcept;

/// Derives per-row key ranges from a dense binary mask. Rejects non-binary
/// entries and rows with no allowed key.
std::vector<KeyRanges> key_ranges_from_mask(const Tensor& mask);

/// Single-head attention core shared by every attention path. q, k, v and out
/// are row-major with row strides `ld_in` / `ld_out`; `dh` columns are read
/// starting at the given pointers. When `probs` is non-null the softmax
/// weights of each row are appended in key order.
void attention_head(const float* q, const float* k, const float* v, std::size_t ld_in, std::size_t dh,
                    std::span<const KeyRanges> rows, float* out, std::size_t ld_out,
                    std::vector<float>* probs = nullptr);

/// softmax(q k^T / sqrt(d)) v restricted to allowed keys. Masked keys are
/// excluded from the max and the normalizer, so their weight is exactly zero.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask);

/// Same arithmetic as masked_attention, driven by precomputed key ranges.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeyRanges> rows);

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-row layer norm without affine parameters. `inv_std` (optional)
/// receives 1/sqrt(var + eps) per row.
Tensor layer_norm(const Tensor& x, std::vector<float>* inv_std = nullptr);

/// Gradient of layer_norm given its output `y`, per-row inverse std and dL/dy.
Tensor layer_norm_backward(const Tensor& y, std::span<const float> inv_std, const Tensor& dy);

struct Modulated {
    Tensor out;
    Tensor gate;
};

/// norm(x) * (1 + scale) + shift, with scale/shift/gate broadcast over rows.
Modulated adaln_modulate(const Tensor& x, const Tensor& scale, const Tensor& shift, const Tensor& gate);

// ---------------------------------------------------------------------------
// Linear algebra and checking
// ---------------------------------------------------------------------------

/// Principal square root of a symmetric positive semidefinite matrix.
/// Throws if `m` is asymmetric beyond 1e-6 or has an eigenvalue below -1e-8
/// (relative to its largest magnitude); tiny negative eigenvalues clamp to 0.
Tensor sym_psd_sqrt(const Tensor& m);

/// Central-difference gradient of f at x. eps must lie in [1e-5, 1e-2].
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float eps);

}  // namespace nextshot
