// SPDX-License-Identifier: Apache-2.0
#include "nextshot/kernels.hpp"

#include <algorithm>
#include <cmath>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "linalg.hpp"

namespace nextshot {

namespace {

std::string dims(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace

namespace {

// Every output element is a p-ordered chain of fused multiply-adds in double,
// so the vector and scalar paths round identically and a row's result does not
// depend on which tile computed it.
#if defined(__AVX2__) && defined(__FMA__)
inline double madd(double a, double b, double c) { return std::fma(a, b, c); }

void gemm_tile_4x8(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                   std::size_t k, bool accumulate) {
    __m256d acc[4][2];
    for (int r = 0; r < 4; ++r) {
        if (accumulate) {
            const __m256 row = _mm256_loadu_ps(c + r * ldc);
            acc[r][0] = _mm256_cvtps_pd(_mm256_castps256_ps128(row));
            acc[r][1] = _mm256_cvtps_pd(_mm256_extractf128_ps(row, 1));
        } else {
            acc[r][0] = _mm256_setzero_pd();
            acc[r][1] = _mm256_setzero_pd();
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256 bv = _mm256_loadu_ps(b + p * ldb);
        const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(bv));
        const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1));
        for (int r = 0; r < 4; ++r) {
            const __m256d x = _mm256_set1_pd(static_cast<double>(a[r * lda + p]));
            acc[r][0] = _mm256_fmadd_pd(x, lo, acc[r][0]);
            acc[r][1] = _mm256_fmadd_pd(x, hi, acc[r][1]);
        }
    }
    for (int r = 0; r < 4; ++r) {
        const __m256 out = _mm256_set_m128(_mm256_cvtpd_ps(acc[r][1]), _mm256_cvtpd_ps(acc[r][0]));
        _mm256_storeu_ps(c + r * ldc, out);
    }
}
#else
inline double madd(double a, double b, double c) { return a * b + c; }
#endif

void gemm_scalar(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                 std::size_t rows, std::size_t cols, std::size_t k, bool accumulate) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = accumulate ? static_cast<double>(c[i * ldc + j]) : 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc = madd(static_cast<double>(a[i * lda + p]), static_cast<double>(b[p * ldb + j]), acc);
            }
            c[i * ldc + j] = static_cast<float>(acc);
        }
    }
}

}  // namespace

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
#if defined(__AVX2__) && defined(__FMA__)
    const std::size_t m4 = m - m % 4;
    const std::size_t n8 = n - n % 8;
    for (std::size_t i = 0; i < m4; i += 4) {
        for (std::size_t j = 0; j < n8; j += 8) gemm_tile_4x8(a + i * k, k, b + j, n, c + i * n + j, n, k, accumulate);
        if (n8 < n) gemm_scalar(a + i * k, k, b + n8, n, c + i * n + n8, n, 4, n - n8, k, accumulate);
    }
    if (m4 < m) gemm_scalar(a + m4 * k, k, b, n, c + m4 * n, n, m - m4, n, k, accumulate);
#else
    gemm_scalar(a, k, b, n, c, n, m, n, k, accumulate);
#endif
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string() +
                                    " (inner extents must match)");
    }
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    gemm(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt: cannot multiply " + a.shape_string() + " by transpose of " +
                                    b.shape_string());
    }
    return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
        throw std::invalid_argument("matmul_tn: cannot multiply transpose of " + a.shape_string() + " by " +
                                    b.shape_string());
    }
    return matmul(transpose(a), b);
}

std::vector<KeyRanges> key_ranges_from_mask(const Tensor& mask) {
    const std::size_t n = mask.rows();
    if (mask.cols() != n) throw std::invalid_argument("attention mask must be square, got " + mask.shape_string());
    std::vector<KeyRanges> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        KeyRanges& r = rows[i];
        for (std::size_t j = 0; j < n; ++j) {
            const float m = mask(i, j);
            if (m != 0.0F && m != 1.0F) {
                throw std::invalid_argument("attention mask entry (" + std::to_string(i) + "," +
                                            std::to_string(j) + ") is not binary");
            }
            if (m == 0.0F) continue;
            if (!r.empty() && r.back().end == j) {
                r.back().end = j + 1;
            } else {
                r.push_back({j, j + 1});
            }
        }
        if (r.empty()) {
            throw std::invalid_argument("attention mask row " + std::to_string(i) + " allows no keys");
        }
    }
    return rows;
}

double dot(const double* a, const double* b, std::size_t n) noexcept {
    double s[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t c = 0;
    for (; c + 4 <= n; c += 4) {
        s[0] += a[c] * b[c];
        s[1] += a[c + 1] * b[c + 1];
        s[2] += a[c + 2] * b[c + 2];
        s[3] += a[c + 3] * b[c + 3];
    }
    for (; c < n; ++c) s[0] += a[c] * b[c];
    return (s[0] + s[1]) + (s[2] + s[3]);
}

void attention_head(const float* q, const float* k, const float* v, std::size_t ld_in, std::size_t dh,
                    std::span<const KeyRanges> rows, float* out, std::size_t ld_out, std::vector<float>* probs) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n = rows.size();
    std::vector<double> qd(n * dh), kd(n * dh), vd(n * dh);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dh; ++c) {
            qd[i * dh + c] = q[i * ld_in + c];
            kd[i * dh + c] = k[i * ld_in + c];
            vd[i * dh + c] = v[i * ld_in + c];
        }
    }
    std::vector<double> scores;
    std::vector<double> acc(dh);
    for (std::size_t i = 0; i < n; ++i) {
        const KeyRanges& ranges = rows[i];
        if (ranges.empty()) {
            throw std::invalid_argument("attention query row " + std::to_string(i) + " has no allowed keys");
        }
        const double* qi = qd.data() + i * dh;
        scores.clear();
        double mx = -std::numeric_limits<double>::infinity();
        for (const KeyRange& r : ranges) {
            for (std::size_t j = r.begin; j < r.end; ++j) {
                const double s = dot(qi, kd.data() + j * dh, dh) * scale;
                scores.push_back(s);
                mx = std::max(mx, s);
            }
        }
        double denom = 0.0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        std::size_t idx = 0;
        for (const KeyRange& r : ranges) {
            for (std::size_t j = r.begin; j < r.end; ++j, ++idx) {
                const double p = scores[idx] / denom;
                if (probs) probs->push_back(static_cast<float>(p));
                const double* vj = vd.data() + j * dh;
                for (std::size_t c = 0; c < dh; ++c) acc[c] += p * vj[c];
            }
        }
        float* oi = out + i * ld_out;
        for (std::size_t c = 0; c < dh; ++c) oi[c] = static_cast<float>(acc[c]);
    }
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeyRanges> rows) {
    const std::size_t n = q.rows();
    const std::size_t d = q.cols();
    if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d) {
        throw std::invalid_argument("masked_attention: q " + q.shape_string() + ", k " + k.shape_string() +
                                    ", v " + v.shape_string() + " must share shape");
    }
    if (rows.size() != n) {
        throw std::invalid_argument("masked_attention: " + std::to_string(rows.size()) + " mask rows for " +
                                    std::to_string(n) + " queries");
    }
    for (const KeyRanges& r : rows) {
        for (const KeyRange& kr : r) {
            if (kr.end > n || kr.begin >= kr.end) throw std::invalid_argument("masked_attention: bad key range");
        }
    }
    Tensor out = Tensor::matrix(n, d);
    attention_head(q.data(), k.data(), v.data(), d, d, rows, out.data(), d);
    return out;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask) {
    if (mask.rank() != 2 || mask.rows() != q.rows()) {
        throw std::invalid_argument("masked_attention: mask " + mask.shape_string() + " does not match " +
                                    std::to_string(q.rows()) + " queries");
    }
    const auto rows = key_ranges_from_mask(mask);
    return masked_attention(q, k, v, rows);
}

Tensor layer_norm(const Tensor& x, std::vector<float>* inv_std) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    Tensor y = Tensor::matrix(n, d);
    if (inv_std) inv_std->assign(n, 0.0F);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        double mean = 0.0;
        for (float v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        auto out = y.row(i);
        for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>((row[j] - mean) * is);
        if (inv_std) (*inv_std)[i] = static_cast<float>(is);
    }
    return y;
}

Tensor layer_norm_backward(const Tensor& y, std::span<const float> inv_std, const Tensor& dy) {
    const std::size_t n = y.rows();
    const std::size_t d = y.cols();
    Tensor dx = Tensor::matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto yr = y.row(i);
        const auto gr = dy.row(i);
        double mg = 0.0;
        double mgy = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mg += gr[j];
            mgy += static_cast<double>(gr[j]) * yr[j];
        }
        mg /= static_cast<double>(d);
        mgy /= static_cast<double>(d);
        auto out = dx.row(i);
        const double is = inv_std[i];
        for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(is * (gr[j] - mg - yr[j] * mgy));
    }
    return dx;
}

Modulated adaln_modulate(const Tensor& x, const Tensor& scale, const Tensor& shift, const Tensor& gate) {
    const std::size_t d = x.cols();
    if (scale.size() != d || shift.size() != d || gate.size() != d) {
        throw std::invalid_argument("adaln_modulate: modulation vectors must have width " + std::to_string(d));
    }
    Tensor y = layer_norm(x);
    for (std::size_t i = 0; i < y.rows(); ++i) {
        auto r = y.row(i);
        for (std::size_t j = 0; j < d; ++j) r[j] = r[j] * (1.0F + scale[j]) + shift[j];
    }
    return {std::move(y), gate};
}

namespace detail {

void check_symmetric_psd(const Eigen::MatrixXd& m, double sym_tol, double neg_tol) {
    if (m.rows() != m.cols()) {
        throw std::invalid_argument("sym_psd_sqrt: matrix is not square (" + dims(m.rows(), m.cols()) + ")");
    }
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    if (asym > sym_tol * scale) {
        throw std::invalid_argument("sym_psd_sqrt: matrix is not symmetric (max |m - m^T| = " +
                                    std::to_string(asym) + ")");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    if (lo < -neg_tol * scale) {
        throw std::invalid_argument("sym_psd_sqrt: matrix is not positive semidefinite (min eigenvalue " +
                                    std::to_string(lo) + ")");
    }
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw std::runtime_error("sym_psd_sqrt: eigendecomposition failed");
    const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd& u = es.eigenvectors();
    Eigen::MatrixXd s = u * roots.asDiagonal() * u.transpose();
    return 0.5 * (s + s.transpose());
}

}  // namespace detail

Tensor sym_psd_sqrt(const Tensor& m) {
    const std::size_t n = m.rows();
    if (m.cols() != n) {
        throw std::invalid_argument("sym_psd_sqrt: matrix is not square (" + m.shape_string() + ")");
    }
    Eigen::MatrixXd md(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) md(i, j) = m(i, j);
    }
    detail::check_symmetric_psd(md, 1e-6, 1e-8);
    const Eigen::MatrixXd s = detail::psd_sqrt(md);
    Tensor out = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<float>(s(i, j));
    }
    return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, float eps) {
    if (!(eps >= 1e-5F && eps <= 1e-2F)) {
        throw std::invalid_argument("finite_diff_grad: eps " + std::to_string(eps) + " outside [1e-5, 1e-2]");
    }
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float x0 = x[i];
        const float hi = x0 + eps;
        const float lo = x0 - eps;
        probe[i] = hi;
        const double fh = f(probe);
        probe[i] = lo;
        const double fl = f(probe);
        probe[i] = x0;
        if (!std::isfinite(fh) || !std::isfinite(fl)) {
            throw std::runtime_error("finite_diff_grad: non-finite function value at element " + std::to_string(i));
        }
        // Use the representable step, not the nominal one.
        g[i] = static_cast<float>((fh - fl) / (static_cast<double>(hi) - static_cast<double>(lo)));
    }
    return g;
}

}  // namespace nextshot
