// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "nextshot/kernels.hpp"
#include "nextshot/rng.hpp"
#include "nextshot/tensor.hpp"
#include "nextshot/tensor_io.hpp"
#include "oracles.hpp"

using namespace nextshot;

namespace {

Tensor random_psd(Rng& rng, std::size_t n) {
    const Tensor a = oracle::random_matrix(rng, n + 2, n);
    return matmul_tn(a, a);
}

double frob_rel_residual(const Tensor& s, const Tensor& m) {
    const Tensor ss = matmul(s, s);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        num += (static_cast<double>(ss[i]) - m[i]) * (static_cast<double>(ss[i]) - m[i]);
        den += static_cast<double>(m[i]) * m[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("matmul: identity, zero and triple-loop oracle") {
    Rng rng(1);
    const Tensor m = oracle::random_matrix(rng, 3, 3);
    CHECK(bit_equal(matmul(Tensor::identity(3), m), m));

    const Tensor z = matmul(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{0}, {0}}));
    CHECK(z.rows() == 2);
    CHECK(z.cols() == 1);
    CHECK(z[0] == 0.0F);
    CHECK(z[1] == 0.0F);

    const Tensor a = oracle::random_matrix(rng, 5, 4);
    const Tensor b = oracle::random_matrix(rng, 4, 6);
    const Tensor c = matmul(a, b);
    const auto ref = oracle::matmul(oracle::to_matrix(a), oracle::to_matrix(b));
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(c(i, j) - ref[i][j]) < 1e-6);
    }
}

TEST_CASE("matmul: transposed variants and odd sizes agree with the oracle") {
    Rng rng(2);
    for (std::size_t m : {1, 3, 4, 7, 9}) {
        for (std::size_t n : {1, 5, 8, 13}) {
            const Tensor a = oracle::random_matrix(rng, m, 6);
            const Tensor b = oracle::random_matrix(rng, 6, n);
            const auto ref = oracle::matmul(oracle::to_matrix(a), oracle::to_matrix(b));
            const Tensor c1 = matmul(a, b);
            const Tensor c2 = matmul_nt(a, transpose(b));
            const Tensor c3 = matmul_tn(transpose(a), b);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    CHECK(std::abs(c1(i, j) - ref[i][j]) < 1e-5);
                    CHECK(std::abs(c2(i, j) - ref[i][j]) < 1e-5);
                    CHECK(std::abs(c3(i, j) - ref[i][j]) < 1e-5);
                }
            }
        }
    }
}

TEST_CASE("matmul: shape mismatch names both shapes") {
    const Tensor a = Tensor::matrix(2, 3);
    const Tensor b = Tensor::matrix(4, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul: associativity on random triples") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = oracle::random_matrix(rng, 4, 5);
        const Tensor b = oracle::random_matrix(rng, 5, 6);
        const Tensor c = oracle::random_matrix(rng, 6, 3);
        const Tensor l = matmul(matmul(a, b), c);
        const Tensor r = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(l, r) / std::max(1.0, frobenius_norm(l)) < 1e-4);
    }
}

TEST_CASE("masked_attention: single token and diagonal mask") {
    Rng rng(4);
    const Tensor q1 = oracle::random_matrix(rng, 1, 4);
    const Tensor v1 = oracle::random_matrix(rng, 1, 4);
    CHECK(bit_equal(masked_attention(q1, q1, v1, Tensor::from_rows({{1}})), v1));

    const Tensor q = oracle::random_matrix(rng, 2, 3);
    const Tensor k = oracle::random_matrix(rng, 2, 3);
    const Tensor v = oracle::random_matrix(rng, 2, 3);
    CHECK(bit_equal(masked_attention(q, k, v, Tensor::from_rows({{1, 0}, {0, 1}})), v));
}

TEST_CASE("masked_attention: scalar-loop oracle with full and random masks") {
    Rng rng(5);
    const Tensor q = oracle::random_matrix(rng, 3, 4);
    const Tensor k = oracle::random_matrix(rng, 3, 4);
    const Tensor v = oracle::random_matrix(rng, 3, 4);
    const Tensor out = masked_attention(q, k, v, Tensor::matrix(3, 3, 1.0F));
    const auto ref = oracle::attention(oracle::to_matrix(q), oracle::to_matrix(k), oracle::to_matrix(v),
                                       [](std::size_t, std::size_t) { return true; });
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out(i, j) - ref[i][j]) < 1e-5);
    }

    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 7;
        Tensor mask = Tensor::matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) mask(i, j) = (i == j || rng.bernoulli(0.5)) ? 1.0F : 0.0F;
        }
        const Tensor qq = oracle::random_matrix(rng, n, 5);
        const Tensor kk = oracle::random_matrix(rng, n, 5);
        const Tensor vv = oracle::random_matrix(rng, n, 5);
        const Tensor o = masked_attention(qq, kk, vv, mask);
        const auto r = oracle::attention(oracle::to_matrix(qq), oracle::to_matrix(kk), oracle::to_matrix(vv),
                                         [&](std::size_t i, std::size_t j) { return mask(i, j) != 0.0F; });
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(o(i, j) - r[i][j]) < 1e-5);
        }
    }
}

TEST_CASE("masked_attention: fully masked row and non-binary entries are rejected") {
    const Tensor q = Tensor::matrix(2, 2, 1.0F);
    CHECK_THROWS_AS(masked_attention(q, q, q, Tensor::from_rows({{1, 1}, {0, 0}})), std::invalid_argument);
    CHECK_THROWS_AS(masked_attention(q, q, q, Tensor::from_rows({{1, 0.5F}, {0, 1}})), std::invalid_argument);
}

TEST_CASE("masked_attention: outputs are convex combinations of allowed values (d = 1)") {
    Rng rng(6);
    const std::size_t n = 9;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor mask = Tensor::matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) mask(i, j) = (i == j || rng.bernoulli(0.4)) ? 1.0F : 0.0F;
        }
        const Tensor q = oracle::random_matrix(rng, n, 1);
        const Tensor k = oracle::random_matrix(rng, n, 1);
        const Tensor v = oracle::random_matrix(rng, n, 1);
        const Tensor o = masked_attention(q, k, v, mask);
        for (std::size_t i = 0; i < n; ++i) {
            float lo = 1e30F, hi = -1e30F;
            for (std::size_t j = 0; j < n; ++j) {
                if (mask(i, j) != 0.0F) {
                    lo = std::min(lo, v[j]);
                    hi = std::max(hi, v[j]);
                }
            }
            CHECK(o[i] >= lo - 1e-6F);
            CHECK(o[i] <= hi + 1e-6F);
        }
    }
}

TEST_CASE("masked_attention: rows never see values of masked keys") {
    Rng rng(7);
    const std::size_t n = 6;
    Tensor mask = Tensor::matrix(n, n, 1.0F);
    for (std::size_t i = 0; i < 3; ++i) mask(i, 4) = mask(i, 5) = 0.0F;
    const Tensor q = oracle::random_matrix(rng, n, 4);
    const Tensor k = oracle::random_matrix(rng, n, 4);
    Tensor v = oracle::random_matrix(rng, n, 4);
    const Tensor before = masked_attention(q, k, v, mask);
    for (std::size_t c = 0; c < 4; ++c) {
        v(4, c) = 1e6F;
        v(5, c) = -3e5F;
    }
    const Tensor after = masked_attention(q, k, v, mask);
    CHECK(bit_equal(before.slice_rows(0, 3), after.slice_rows(0, 3)));
    CHECK_FALSE(bit_equal(before.slice_rows(3, 3), after.slice_rows(3, 3)));
}

TEST_CASE("adaln_modulate: zero modulation, constant rows and scalar oracle") {
    Rng rng(8);
    const std::size_t d = 6;
    const Tensor x = oracle::random_matrix(rng, 4, d);
    const Tensor zero = Tensor::vector(d);
    const Modulated plain = adaln_modulate(x, zero, zero, zero);
    CHECK(bit_equal(plain.out, layer_norm(x)));

    Tensor shift = Tensor::vector(d);
    rng.fill_normal(shift);
    const Modulated c = adaln_modulate(Tensor::matrix(2, d, 3.5F), zero, shift, zero);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t j = 0; j < d; ++j) CHECK(c.out(r, j) == doctest::Approx(shift[j]).epsilon(1e-6));
    }

    Tensor scale = Tensor::vector(d), gate = Tensor::vector(d);
    rng.fill_normal(scale);
    rng.fill_normal(gate);
    const Modulated m = adaln_modulate(x, scale, shift, gate);
    CHECK(bit_equal(m.gate, gate));
    for (std::size_t r = 0; r < 4; ++r) {
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) row[j] = x(r, j);
        const auto y = oracle::layer_norm_row(row);
        for (std::size_t j = 0; j < d; ++j) {
            CHECK(std::abs(m.out(r, j) - (y[j] * (1.0 + scale[j]) + shift[j])) < 1e-5);
        }
    }
}

TEST_CASE("sym_psd_sqrt: identity, diagonal and Jacobi oracle") {
    CHECK(max_abs_diff(sym_psd_sqrt(Tensor::identity(4)), Tensor::identity(4)) < 1e-7);
    const Tensor s = sym_psd_sqrt(Tensor::from_rows({{4, 0}, {0, 9}}));
    CHECK(s(0, 0) == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(s(1, 1) == doctest::Approx(3.0).epsilon(1e-7));
    CHECK(std::abs(s(0, 1)) < 1e-7);

    Rng rng(9);
    const Tensor m = random_psd(rng, 6);
    const Tensor root = sym_psd_sqrt(m);
    const auto ref = oracle::psd_sqrt(oracle::to_matrix(m));
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(root(i, j) - ref[i][j]) < 1e-5 * std::max(1.0, std::abs(ref[i][j])));
    }
}

TEST_CASE("sym_psd_sqrt: residual on 100 random PSD matrices up to 16x16") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(16);
        const Tensor m = random_psd(rng, n);
        const Tensor s = sym_psd_sqrt(m);
        CHECK(frob_rel_residual(s, m) < 1e-5);
        CHECK(max_abs_diff(s, transpose(s)) < 1e-6);
    }
}

TEST_CASE("sym_psd_sqrt: asymmetric or indefinite input is rejected by name") {
    CHECK_THROWS_WITH_AS(sym_psd_sqrt(Tensor::from_rows({{1, 0.5F}, {0, 1}})), doctest::Contains("symmetric"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(sym_psd_sqrt(Tensor::from_rows({{1, 0}, {0, -1}})), doctest::Contains("semidefinite"),
                         std::invalid_argument);
    const Tensor tiny_negative = Tensor::from_rows({{1, 0}, {0, -1e-9F}});
    CHECK(sym_psd_sqrt(tiny_negative)(1, 1) == 0.0F);
}

TEST_CASE("finite_diff_grad: sum and half squared norm") {
    Rng rng(11);
    const Tensor x = oracle::random_matrix(rng, 3, 4);
    const Tensor g1 = finite_diff_grad(
        [](const Tensor& t) {
            double s = 0.0;
            for (float v : t.values()) s += v;
            return s;
        },
        x, 1e-3F);
    for (float v : g1.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    const Tensor g2 = finite_diff_grad(
        [](const Tensor& t) {
            double s = 0.0;
            for (float v : t.values()) s += 0.5 * static_cast<double>(v) * v;
            return s;
        },
        x, 1e-2F);
    CHECK(max_abs_diff(g2, x) < 1e-4);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.1F), std::invalid_argument);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return std::nan(""); }, x, 1e-3F), std::runtime_error);
}

TEST_CASE("kernels are bit-identical across repeated calls") {
    Rng rng(12);
    const Tensor a = oracle::random_matrix(rng, 17, 11);
    const Tensor b = oracle::random_matrix(rng, 11, 9);
    CHECK(bit_equal(matmul(a, b), matmul(a, b)));
    const Tensor q = oracle::random_matrix(rng, 8, 4);
    const Tensor mask = Tensor::matrix(8, 8, 1.0F);
    CHECK(bit_equal(masked_attention(q, q, q, mask), masked_attention(q, q, q, mask)));
    const Tensor m = random_psd(rng, 5);
    CHECK(bit_equal(sym_psd_sqrt(m), sym_psd_sqrt(m)));
}

TEST_CASE("gemm: results do not depend on the row position inside a batch") {
    Rng rng(13);
    const Tensor a = oracle::random_matrix(rng, 13, 21);
    const Tensor b = oracle::random_matrix(rng, 21, 19);
    const Tensor full = matmul(a, b);
    for (std::size_t r = 0; r < 13; ++r) {
        const Tensor one = matmul(a.slice_rows(r, 1), b);
        CHECK(bit_equal(one, full.slice_rows(r, 1)));
    }
}

TEST_CASE("rng: seeded streams, labelled splits and ranges") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    const Rng root(7);
    Rng s1 = root.split("noise"), s2 = root.split("noise"), s3 = root.split("order");
    const auto x1 = s1.next_u64();
    CHECK(x1 == s2.next_u64());
    CHECK(x1 != s3.next_u64());
    Rng r(3);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform_open();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(5) < 5);
    }
}

TEST_CASE("tensor file round trip and rejection of a bad magic") {
    Rng rng(14);
    Tensor t({2, 3, 4});
    rng.fill_normal(t);
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.size() == 8 + 4 + 3 * 8 + t.size() * 4);
    const Tensor back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    CHECK(bit_equal(back, t));
    std::stringstream bad("XXXXXXXX");
    CHECK_THROWS(read_tensor(bad));
}
