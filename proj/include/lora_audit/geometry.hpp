// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "lora_audit/lora.hpp"
#include "lora_audit/tensor.hpp"

namespace lora_audit {

inline constexpr double kDefaultEpsilon = 1e-8;
/// Consistency constant that makes MAD estimate the standard deviation under normality.
inline constexpr double kMadConsistency = 0.6745;

/// Frobenius: sqrt of the sum of squares. Spectral: largest singular value by power
/// iteration on MᵀM (at most 50 iterations, stop at relative change < 1e-10).
/// Tensors of rank > 2 are viewed as (dim0, rest).
double matrixNorm(const Tensor& m, NormKind kind = NormKind::frobenius);

/// Batch-level summary of an update trajectory.
struct PhysicsEmbedding {
    double mu = 0.0;              // mean of h_t
    double sigma = 0.0;           // population standard deviation of h_t
    double energy = 0.0;          // E = mu / (||W|| + eps)
    double chaos = 0.0;           // C = sigma / (mu + eps)
    double relativeEnergy = 0.0;  // E_rel = mu / ||W||
    double logNormRatio = 0.0;    // R = log((h_T + eps) / ||W||)
    double variation = 0.0;       // CV, identical to C
    double epsilon = kDefaultEpsilon;
};

PhysicsEmbedding trajectoryStats(std::span<const double> norms, double baseNorm,
                                 double epsilon = kDefaultEpsilon);
PhysicsEmbedding trajectoryStats(const UpdateTrajectory& trajectory,
                                 double epsilon = kDefaultEpsilon);

/// Frobenius inner product over the product of Frobenius norms.
/// Throws DegenerateInputError when either operand has zero norm.
double cosineAlignment(std::span<const double> w, std::span<const double> delta);
double cosineAlignment(const Tensor& w, const Tensor& delta);

/// Even lengths average the two central order statistics.
double median(std::span<const double> values);

struct RobustStats {
    double median = 0.0;
    double mad = 0.0;
};

RobustStats robustStats(std::span<const double> values);

/// 0.6745 (x_i - median) / MAD, or 0 when MAD == 0. Requires at least two values.
double robustZ(std::span<const double> values, std::size_t index);
std::vector<double> robustZScores(std::span<const double> values);

double sigmoid(double x);

}  // namespace lora_audit
