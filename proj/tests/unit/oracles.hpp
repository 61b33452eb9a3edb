// SPDX-License-Identifier: Apache-2.0
// Straightforward reference implementations used as test oracles. None of
// these share code with the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "nextshot/rng.hpp"
#include "nextshot/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const nextshot::Tensor& t) {
    Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i) {
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
    }
    return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    const std::size_t m = a.size(), k = b.size(), n = b.front().size();
    Matrix c(m, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t p = 0; p < k; ++p) c[i][j] += a[i][p] * b[p][j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.front().size(), std::vector<double>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
    }
    return t;
}

/// softmax(q k^T / sqrt(d)) v over keys with allowed(i, j).
template <class Allowed>
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, Allowed allowed) {
    const std::size_t n = q.size(), d = q.front().size();
    Matrix out(n, std::vector<double>(v.front().size(), 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            if (!allowed(i, j)) continue;
            for (std::size_t c = 0; c < d; ++c) s[j] += q[i][c] * k[j][c];
            s[j] /= std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (allowed(i, j)) z += std::exp(s[j] - mx);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (!allowed(i, j)) continue;
            const double w = std::exp(s[j] - mx) / z;
            for (std::size_t c = 0; c < v[j].size(); ++c) out[i][c] += w * v[j][c];
        }
    }
    return out;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x, double eps = 1e-6) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps);
    return y;
}

/// Cyclic Jacobi eigensolver for a symmetric matrix: eigenvalues and
/// eigenvectors (as columns of the returned matrix).
inline std::pair<std::vector<double>, Matrix> jacobi_eigen(Matrix a) {
    const std::size_t n = a.size();
    Matrix v(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        }
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = a[i][i];
    return {w, v};
}

inline Matrix psd_sqrt(const Matrix& m) {
    auto [w, v] = jacobi_eigen(m);
    const std::size_t n = m.size();
    Matrix s(n, std::vector<double>(n, 0.0));
    for (std::size_t k = 0; k < n; ++k) {
        const double r = std::sqrt(std::max(0.0, w[k]));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) s[i][j] += v[i][k] * r * v[j][k];
        }
    }
    return s;
}

/// Frechet distance of Gaussian fits via the Jacobi eigensolver, using the
/// eigenvalues of Ca Cb (similar to sqrt(Ca) Cb sqrt(Ca)).
inline double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                  double shrinkage) {
    const std::size_t d = a.front().size();
    auto fit = [&](const std::vector<std::vector<double>>& x) {
        std::vector<double> mu(d, 0.0);
        for (const auto& r : x) {
            for (std::size_t i = 0; i < d; ++i) mu[i] += r[i];
        }
        for (double& v : mu) v /= static_cast<double>(x.size());
        Matrix c(d, std::vector<double>(d, 0.0));
        for (const auto& r : x) {
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) c[i][j] /= static_cast<double>(x.size() - 1);
            c[i][i] += shrinkage;
        }
        return std::make_pair(mu, c);
    };
    const auto [ma, ca] = fit(a);
    const auto [mb, cb] = fit(b);
    const Matrix sa = psd_sqrt(ca);
    const Matrix inner = matmul(matmul(sa, cb), sa);
    Matrix sym(d, std::vector<double>(d));
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) sym[i][j] = 0.5 * (inner[i][j] + inner[j][i]);
    }
    const auto [w, v] = jacobi_eigen(sym);
    double tr_sqrt = 0.0;
    for (double x : w) tr_sqrt += std::sqrt(std::max(0.0, x));
    double dist = 0.0;
    for (std::size_t i = 0; i < d; ++i) dist += (ma[i] - mb[i]) * (ma[i] - mb[i]) + ca[i][i] + cb[i][i];
    return dist - 2.0 * tr_sqrt;
}

inline nextshot::Tensor random_matrix(nextshot::Rng& rng, std::size_t rows, std::size_t cols, float sd = 1.0F) {
    nextshot::Tensor t = nextshot::Tensor::matrix(rows, cols);
    rng.fill_normal(t, sd);
    return t;
}

}  // namespace oracle
