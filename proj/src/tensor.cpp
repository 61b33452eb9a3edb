// SPDX-License-Identifier: Apache-2.0
#include "nextshot/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace nextshot {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_string());
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, float fill) {
    return Tensor({rows, cols}, fill);
}

Tensor Tensor::vector(std::size_t n, float fill) { return Tensor({n}, fill); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0F;
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + shape_string());
    }
    return shape_[axis];
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw std::invalid_argument("expected a matrix, got shape " + shape_string());
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw std::invalid_argument("expected a matrix, got shape " + shape_string());
    return shape_[1];
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t c = cols();
    return {data_.data() + r * c, c};
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t c = cols();
    return {data_.data() + r * c, c};
}

void Tensor::reshape(std::vector<std::size_t> shape) {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("reshape changes element count");
    }
    shape_ = std::move(shape);
}

void Tensor::fill(float v) noexcept {
    for (auto& x : data_) x = v;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t count) const {
    const std::size_t c = cols();
    if (begin + count > rows()) throw std::out_of_range("slice_rows past end");
    Tensor out = matrix(count, c);
    if (count > 0) std::memcpy(out.data(), data_.data() + begin * c, count * c * sizeof(float));
    return out;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    return a.shape() == b.shape() &&
           (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

bool all_finite(const Tensor& t) noexcept {
    for (float v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("max_abs_diff: shapes " + a.shape_string() + " vs " + b.shape_string());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (float v : t.values()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

Tensor transpose(const Tensor& m) {
    const std::size_t r = m.rows();
    const std::size_t c = m.cols();
    Tensor out = Tensor::matrix(c, r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out(j, i) = m(i, j);
    }
    return out;
}

void add_inplace(Tensor& dst, const Tensor& src, float scale) {
    if (dst.shape() != src.shape()) {
        throw std::invalid_argument("add_inplace: shapes " + dst.shape_string() + " vs " + src.shape_string());
    }
    float* d = dst.data();
    const float* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += scale * s[i];
}

Tensor concat_rows(std::span<const Tensor* const> parts) {
    if (parts.empty()) return {};
    const std::size_t c = parts.front()->cols();
    std::size_t r = 0;
    for (const Tensor* p : parts) {
        if (p->cols() != c) {
            throw std::invalid_argument("concat_rows: width " + std::to_string(p->cols()) + " vs " +
                                        std::to_string(c));
        }
        r += p->rows();
    }
    Tensor out = Tensor::matrix(r, c);
    std::size_t off = 0;
    for (const Tensor* p : parts) {
        if (p->size() > 0) std::memcpy(out.data() + off, p->data(), p->size() * sizeof(float));
        off += p->size();
    }
    return out;
}

}  // namespace nextshot
