// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "lora_audit/errors.hpp"

namespace lora_audit {

namespace {

void requireFinite(const Tensor& m) {
    if (!m.allFinite()) throw ValidationError("matrix norm of a non-finite matrix");
}

double spectralNorm(const Tensor& m) {
    const std::size_t rows = m.rank() == 0 ? 0 : m.dim(0);
    if (rows == 0 || m.size() == 0) return 0.0;
    const std::size_t cols = m.size() / rows;
    // v <- MᵀM v / ||MᵀM v||; the Rayleigh quotient ||M v||² tracks σ_max².
    std::vector<double> v(cols, 1.0 / std::sqrt(static_cast<double>(cols)));
    std::vector<double> mv(rows), mtmv(cols);
    double previous = 0.0, sigma = 0.0;
    for (int iter = 0; iter < 50; ++iter) {
        for (std::size_t i = 0; i < rows; ++i) {
            mv[i] = dot(std::span<const double>(&m.data[i * cols], cols), v);
        }
        std::fill(mtmv.begin(), mtmv.end(), 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) mtmv[j] += m.data[i * cols + j] * mv[i];
        }
        const double len = std::sqrt(dot(mtmv, mtmv));
        if (len == 0.0) {
            // Start vector in the null space; restart from a non-symmetric vector.
            if (iter == 0) {
                for (std::size_t j = 0; j < cols; ++j) v[j] = static_cast<double>(j + 1);
                const double vl = std::sqrt(dot(v, v));
                for (double& x : v) x /= vl;
                continue;
            }
            return 0.0;
        }
        sigma = std::sqrt(dot(mv, mv));
        for (std::size_t j = 0; j < cols; ++j) v[j] = mtmv[j] / len;
        if (iter > 0 && std::abs(sigma - previous) <= 1e-10 * std::max(sigma, 1e-300)) break;
        previous = sigma;
    }
    for (std::size_t i = 0; i < rows; ++i) {
        mv[i] = dot(std::span<const double>(&m.data[i * cols], cols), v);
    }
    return std::max(sigma, std::sqrt(dot(mv, mv)));
}

}  // namespace

double matrixNorm(const Tensor& m, NormKind kind) {
    requireFinite(m);
    if (kind == NormKind::frobenius) return std::sqrt(dot(m.data, m.data));
    return spectralNorm(m);
}

PhysicsEmbedding trajectoryStats(std::span<const double> norms, double baseNorm, double epsilon) {
    if (norms.empty()) throw ValidationError("trajectory statistics need at least one epoch");
    if (!(baseNorm > 0.0)) throw ValidationError("base norm must be positive");
    const double t = static_cast<double>(norms.size());
    double mu = 0.0;
    for (double h : norms) mu += h;
    mu /= t;
    double var = 0.0;
    for (double h : norms) var += (h - mu) * (h - mu);
    var /= t;

    PhysicsEmbedding e;
    e.epsilon = epsilon;
    e.mu = mu;
    e.sigma = std::sqrt(var);
    e.energy = mu / (baseNorm + epsilon);
    e.chaos = e.sigma / (mu + epsilon);
    e.relativeEnergy = mu / baseNorm;
    e.logNormRatio = std::log((norms.back() + epsilon) / baseNorm);
    e.variation = e.chaos;
    return e;
}

PhysicsEmbedding trajectoryStats(const UpdateTrajectory& trajectory, double epsilon) {
    return trajectoryStats(trajectory.norms, trajectory.baseNorm, epsilon);
}

double cosineAlignment(std::span<const double> w, std::span<const double> delta) {
    if (w.size() != delta.size()) {
        throw DimensionError("alignment operands differ in length");
    }
    const double nw = std::sqrt(dot(w, w));
    const double nd = std::sqrt(dot(delta, delta));
    if (nw == 0.0 || nd == 0.0) throw DegenerateInputError("alignment with a zero-norm operand");
    return std::clamp(dot(w, delta) / (nw * nd), -1.0, 1.0);
}

double cosineAlignment(const Tensor& w, const Tensor& delta) {
    if (w.shape != delta.shape && w.size() != delta.size()) {
        throw DimensionError("alignment operands " + shapeString(w.shape) + " and " +
                             shapeString(delta.shape));
    }
    return cosineAlignment(std::span<const double>(w.data), std::span<const double>(delta.data));
}

double median(std::span<const double> values) {
    if (values.empty()) throw ValidationError("median of an empty list");
    std::vector<double> v(values.begin(), values.end());
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower =
        *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return (lower + upper) / 2.0;
}

RobustStats robustStats(std::span<const double> values) {
    RobustStats s;
    s.median = median(values);
    std::vector<double> deviations(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) deviations[i] = std::abs(values[i] - s.median);
    s.mad = median(deviations);
    return s;
}

double robustZ(std::span<const double> values, std::size_t index) {
    if (values.size() < 2) throw ValidationError("robust z-scores need at least two values");
    if (index >= values.size()) throw ValidationError("robust z index out of range");
    const auto s = robustStats(values);
    if (s.mad == 0.0) return 0.0;
    return kMadConsistency * (values[index] - s.median) / s.mad;
}

std::vector<double> robustZScores(std::span<const double> values) {
    if (values.size() < 2) throw ValidationError("robust z-scores need at least two values");
    const auto s = robustStats(values);
    std::vector<double> z(values.size(), 0.0);
    if (s.mad == 0.0) return z;
    for (std::size_t i = 0; i < values.size(); ++i) {
        z[i] = kMadConsistency * (values[i] - s.median) / s.mad;
    }
    return z;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace lora_audit
