// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace nextshot {

/// Dense row-major float32 array with an explicit shape.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0F);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, float fill = 0.0F);
    static Tensor vector(std::size_t n, float fill = 0.0F);
    static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Matrix view; throws unless rank == 2.
    std::size_t rows() const;
    std::size_t cols() const;

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    void reshape(std::vector<std::size_t> shape);
    void fill(float v) noexcept;

    /// Rows [begin, begin + count) of a matrix as a new matrix.
    Tensor slice_rows(std::size_t begin, std::size_t count) const;

    std::string shape_string() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Bitwise comparison: distinguishes -0 from +0 and compares NaN payloads.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;
bool all_finite(const Tensor& t) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& t);

Tensor transpose(const Tensor& m);
void add_inplace(Tensor& dst, const Tensor& src, float scale = 1.0F);
Tensor concat_rows(std::span<const Tensor* const> parts);

}  // namespace nextshot
