// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lora_audit/geometry.hpp"
#include "lora_audit/lora.hpp"
#include "lora_audit/nn.hpp"

namespace lora_audit {

enum class Regime { coherent = 0, scaleVarying = 1, chaotic = 2 };
inline constexpr std::size_t kRegimeCount = 3;

std::string toString(Regime regime);

/// Prototype location in standardized (E, C) coordinates.
struct RegimePrototype {
    Regime id = Regime::coherent;
    double energy = 0.0;
    double chaos = 0.0;
};

using Prototypes = std::array<RegimePrototype, kRegimeCount>;

/// (-1,-1) coherent, (0,0) scale-varying, (+1,+1) chaotic.
Prototypes defaultPrototypes();

struct MembershipConfig {
    double lambdaE = 2.0;
    double lambdaC = 1.0;
    double temperature = 1.0;
    double alphaThreshold = 0.02;
    double beta1 = 4.0;
    double beta2 = 4.0;
    double beta3 = 4.0;
    /// Chaos-adapted energy pivot kappa(CV) = kappa1 * (kappa0 + gamma * CV).
    double kappa0 = 1.0;
    double gamma = 0.05;
    double epsilon = kDefaultEpsilon;
    /// Energy pivot as a fraction of the neighbour run's energy.
    double pivotRatio = 0.2;
    /// Per-pixel drop probability used to build the neighbour batch.
    double neighbourDropout = 0.2;

    // Audit fine-tuning.
    std::size_t rank = 2;
    double learningRate = 0.1;
    std::size_t epochs = 10;
    std::size_t batchSize = 32;
    std::uint64_t seed = 0;
    NormKind norm = NormKind::frobenius;

    void validate() const;
    TrainConfig trainConfig() const;
};

/// Per-layer pivots. beta1 already carries the 1/kappa1 rescaling applied by the audit.
struct ExpertPivots {
    double kappa0 = 0.0;
    double kappa1 = 0.0;
    double kappa2 = 0.0;
    double kappa3 = 0.0;
    double gamma = 0.0;
    double beta1 = 4.0;
    double beta2 = 4.0;
    double beta3 = 4.0;
};

struct RegimeAssignment {
    std::array<double, kRegimeCount> distances{};
    std::array<double, kRegimeCount> weights{};
};

/// d_r = sqrt(lambdaE (E - E_r)^2 + lambdaC (C - C_r)^2), w = softmax(-d / temperature).
RegimeAssignment regimeWeights(double energy, double chaos, const Prototypes& prototypes,
                               const MembershipConfig& config);

/// Maps (E, C) onto (-1, 1) around the pivots: x -> 2x / (x + pivot) - 1.
std::array<double, 2> standardizedCoordinates(const PhysicsEmbedding& emb,
                                              const ExpertPivots& pivots, double epsilon);

double expertCoherent(const PhysicsEmbedding& emb, const ExpertPivots& pivots);
double expertScaleInvariant(const PhysicsEmbedding& emb, const ExpertPivots& pivots);
double expertChaotic(const PhysicsEmbedding& emb, const ExpertPivots& pivots);
std::array<double, kRegimeCount> expertScores(const PhysicsEmbedding& emb,
                                              const ExpertPivots& pivots);

double membershipScore(std::span<const double, kRegimeCount> weights,
                       std::span<const double, kRegimeCount> scores);

/// 0.5 + alpha * ln(1 + T).
double decisionThreshold(std::size_t epochs, double alphaThreshold);

/// Coefficient of variation of h_t = t for t = 1..T: the CV of a constant-speed drift.
double linearDriftVariation(std::size_t epochs);

/// Pivots for one layer from the neighbour run's embedding.
ExpertPivots derivePivots(const PhysicsEmbedding& neighbour, std::size_t epochs,
                          const MembershipConfig& config);

enum class Decision { member, nonMember };
std::string toString(Decision decision);

struct LayerAudit {
    std::size_t layerIndex = 0;
    PhysicsEmbedding embedding;
    PhysicsEmbedding neighbour;
    ExpertPivots pivots;
    std::array<double, 2> coordinates{};
    RegimeAssignment regimes;
    std::array<double, kRegimeCount> experts{};
    std::vector<double> norms;
};

struct MembershipVerdict {
    double score = 0.0;
    double threshold = 0.0;
    std::array<double, kRegimeCount> weights{};
    std::array<double, kRegimeCount> experts{};
    Decision decision = Decision::nonMember;
    /// Embedding of the first audited layer.
    PhysicsEmbedding embedding;
    std::vector<LayerAudit> layers;
};

/// Combines per-layer results: weights and expert scores are averaged uniformly, then
/// S = sum_r w_r s_r and member iff S > theta(T).
MembershipVerdict combineLayers(std::vector<LayerAudit> layers, std::size_t epochs,
                                const MembershipConfig& config);

/// Pixels zeroed independently with probability p, seeded.
Tensor dropoutNeighbour(const Tensor& batch, double probability, std::uint64_t seed);

/// Fine-tunes fresh adapters on the batch and on its dropout neighbour, then scores the
/// trajectory against pivots derived from the neighbour run.
MembershipVerdict auditMembership(const Model& model, std::span<const LoraPlacement> placements,
                                  const Tensor& batch, std::span<const int> labels,
                                  const MembershipConfig& config);

void to_json(nlohmann::json& j, const PhysicsEmbedding& e);
void to_json(nlohmann::json& j, const MembershipConfig& c);
void from_json(const nlohmann::json& j, MembershipConfig& c);
void to_json(nlohmann::json& j, const MembershipVerdict& v);

}  // namespace lora_audit
