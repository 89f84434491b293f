// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lora_audit {

using Shape = std::vector<std::size_t>;

std::size_t shapeProduct(std::span<const std::size_t> shape);
std::string shapeString(std::span<const std::size_t> shape);

/// Dense row-major array of doubles.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    /// Throws DimensionError when product(shape) != data.size().
    Tensor(Shape shape, std::vector<double> data);

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }
    bool empty() const noexcept { return data.empty(); }

    double& operator[](std::size_t i) noexcept { return data[i]; }
    double operator[](std::size_t i) const noexcept { return data[i]; }

    /// Element (r, c) of a 2-D tensor.
    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool allFinite() const noexcept;

    /// Same data viewed with a different shape of equal element count.
    Tensor reshaped(Shape newShape) const;

    bool operator==(const Tensor&) const = default;
};

// Matrix helpers. All operands are 2-D tensors; mismatches throw DimensionError.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmulTransB(const Tensor& a, const Tensor& b);
/// a^T * b
Tensor matmulTransA(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor identity(std::size_t n);

/// Sum of elementwise products over equal-length buffers.
double dot(std::span<const double> a, std::span<const double> b);

/// Rows [first, first + count) of the leading axis.
Tensor sliceRows(const Tensor& t, std::size_t first, std::size_t count);
/// Gathers entries of the leading axis.
Tensor gatherRows(const Tensor& t, std::span<const std::size_t> indices);

}  // namespace lora_audit
