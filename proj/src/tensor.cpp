// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "lora_audit/errors.hpp"

namespace lora_audit {

std::size_t shapeProduct(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shapeString(std::span<const std::size_t> shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? ", " : "") << shape[i];
    }
    out << ')';
    return out.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shapeProduct(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shapeProduct(shape) != data.size()) {
        throw DimensionError("tensor shape " + shapeString(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    }
}

bool Tensor::allFinite() const noexcept {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape newShape) const {
    return Tensor(std::move(newShape), data);
}

namespace {

void requireMatrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(what) + " must be 2-D, got " + shapeString(t.shape));
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    requireMatrix(a, "matmul lhs");
    requireMatrix(b, "matmul rhs");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul " + shapeString(a.shape) + " x " + shapeString(b.shape));
    }
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &out.data[i * m];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b.data[p * m];
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
    return out;
}

Tensor matmulTransB(const Tensor& a, const Tensor& b) {
    requireMatrix(a, "matmul lhs");
    requireMatrix(b, "matmul rhs");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul " + shapeString(a.shape) + " x T" + shapeString(b.shape));
    }
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = &a.data[i * k];
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = &b.data[j * k];
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::size_t p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += arow[p] * brow[p];
                s1 += arow[p + 1] * brow[p + 1];
                s2 += arow[p + 2] * brow[p + 2];
                s3 += arow[p + 3] * brow[p + 3];
            }
            for (; p < k; ++p) s0 += arow[p] * brow[p];
            out.data[i * m + j] = (s0 + s1) + (s2 + s3);
        }
    }
    return out;
}

Tensor matmulTransA(const Tensor& a, const Tensor& b) {
    requireMatrix(a, "matmul lhs");
    requireMatrix(b, "matmul rhs");
    const std::size_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul T" + shapeString(a.shape) + " x " + shapeString(b.shape));
    }
    Tensor out({n, m});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = &a.data[p * n];
        const double* brow = &b.data[p * m];
        for (std::size_t i = 0; i < n; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = &out.data[i * m];
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    requireMatrix(a, "transpose operand");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a.data[i * c + j];
    }
    return out;
}

Tensor identity(std::size_t n) {
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.data[i * n + i] = 1.0;
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot of lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Tensor sliceRows(const Tensor& t, std::size_t first, std::size_t count) {
    if (t.rank() == 0 || first + count > t.dim(0)) {
        throw DimensionError("row slice out of range for " + shapeString(t.shape));
    }
    Shape shape = t.shape;
    shape[0] = count;
    const std::size_t stride = t.size() / t.dim(0);
    const auto begin = t.data.begin() + static_cast<std::ptrdiff_t>(first * stride);
    return Tensor(std::move(shape),
                  std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * stride)));
}

Tensor gatherRows(const Tensor& t, std::span<const std::size_t> indices) {
    if (t.rank() == 0) throw DimensionError("cannot gather rows of a scalar tensor");
    Shape shape = t.shape;
    shape[0] = indices.size();
    const std::size_t stride = t.dim(0) ? t.size() / t.dim(0) : 0;
    Tensor out(std::move(shape));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= t.dim(0)) throw DimensionError("row index out of range");
        std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return out;
}

}  // namespace lora_audit
