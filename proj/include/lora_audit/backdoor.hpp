// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lora_audit/lora.hpp"
#include "lora_audit/nn.hpp"
#include "lora_audit/tensor.hpp"

namespace lora_audit {

enum class Strategy { sparse, smooth, hybrid };
inline constexpr std::array<Strategy, 3> kStrategies = {Strategy::sparse, Strategy::smooth,
                                                        Strategy::hybrid};
std::string toString(Strategy strategy);

enum class Corner { topLeft, topRight, bottomLeft, bottomRight };
inline constexpr std::array<Corner, 4> kCorners = {Corner::topLeft, Corner::topRight,
                                                   Corner::bottomLeft, Corner::bottomRight};
std::string toString(Corner corner);

struct SynthesisConfig {
    std::size_t steps = 100;
    double stepSize = 0.1;
    double noiseScale = 0.01;
    std::size_t batchSize = 16;
    double strategyBalance = 0.7;
    /// Edge of the sparse patch; 0 means smaller image edge / 4.
    std::size_t maskSize = 0;
    /// Weight of the squared-difference total variation (smooth and hybrid only).
    double smoothnessWeight = 0.05;
    /// Weight of the mean cosine similarity to the rest of the batch, which pushes
    /// proxies apart.
    double contrastWeight = 0.05;
    Corner corner = Corner::bottomRight;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Squared-difference total variation of one (C, H, W) image, and its gradient.
double totalVariation(std::span<const double> image, std::size_t channels, std::size_t height,
                      std::size_t width, std::span<double> gradient);

/// Mean pairwise cosine similarity over all unordered pairs of rows.
double meanPairwiseCosine(const Tensor& batch);

/// Proxy inputs for one class: seeded uniform starting images moved by
/// x <- clamp(x - eta * grad L_proxy + sigma * noise). Sparse proxies share one seeded
/// background and differ only inside the corner patch; the other strategies start from
/// independent uniform noise.
Tensor synthesizeProxy(const Model& model, int targetClass, Strategy strategy,
                       const SynthesisConfig& config);

/// Mean softmax probability of `targetClass` over the batch.
double meanConfidence(const Model& model, const Tensor& batch, int targetClass);

/// lambda * mean confidence + (1 - lambda) * mean pairwise cosine similarity.
double strategyScore(const Model& model, const Tensor& batch, int targetClass, double balance);

struct SignatureValues {
    double energy = 0.0;     // ||dW|| / ||W||
    double alignment = 0.0;  // cos(W, dW)
    bool degenerate = false;
};

/// Metrics over the concatenation of the given weight and update matrices.
SignatureValues signatureFromUpdates(std::span<const Tensor* const> weights,
                                     std::span<const Tensor* const> updates,
                                     NormKind norm = NormKind::frobenius);

/// Fine-tunes fresh adapters on the proxies (labelled `targetClass`) and measures the
/// final updates against the frozen weights.
SignatureValues classSignature(const Model& model, std::span<const LoraPlacement> placements,
                               std::size_t rank, const Tensor& proxies, int targetClass,
                               const TrainConfig& config, std::uint64_t adapterSeed,
                               NormKind norm = NormKind::frobenius);

enum class ScoreRegime { alignmentPeak, energyAnomaly, conservative };
std::string toString(ScoreRegime regime);

struct ClassSignature {
    int classId = 0;
    double energy = 0.0;
    double alignment = 0.0;
    bool degenerate = false;
    double zEnergy = 0.0;
    double zAlignment = 0.0;
    double score = 0.0;
    ScoreRegime regime = ScoreRegime::conservative;
    Strategy strategy = Strategy::smooth;
    Corner corner = Corner::bottomRight;
    double strategyScore = 0.0;
};

struct ScoringConfig {
    double beta1 = 0.7;
    double beta2 = 0.3;
    /// Lower bound of the dynamic gap thresholds.
    double tauFloor = 0.5;
};

struct ScoringResult {
    ScoreRegime regime = ScoreRegime::conservative;
    double tauAlignment = 0.0;
    double tauEnergy = 0.0;
};

/// Fills z-scores, scores and regime of every signature in place.
ScoringResult scoreClasses(std::span<ClassSignature> signatures, const ScoringConfig& config);

struct TrialRanking {
    std::size_t trialId = 0;
    std::uint64_t seed = 0;
    ScoringResult scoring;
    std::vector<int> rankedClasses;  // best first
    std::vector<ClassSignature> perClass;

    /// 1-based rank of a class.
    std::size_t rankOf(int classId) const;
};

/// Sorts by descending score, ascending classId on ties.
std::vector<int> rankByScore(std::span<const ClassSignature> signatures);

struct BackdoorConfig {
    SynthesisConfig synthesis;
    TrainConfig signatureTraining{0.01, 5, 16, 0, OptimizerKind::adam};
    ScoringConfig scoring;
    std::size_t rank = 8;
    std::size_t trials = 5;
    double stabilityVarMax = 1.0;
    std::uint64_t seed = 0;
    NormKind norm = NormKind::frobenius;

    void validate() const;
};

/// One trial: per class, the sparse strategy is run at every corner, hybrid at the best
/// sparse corner, smooth once; the proxies with the highest strategy score are
/// fine-tuned on. Then signatures are scored and ranked.
TrialRanking runTrial(const Model& model, std::span<const LoraPlacement> placements,
                      std::span<const int> candidateClasses, const BackdoorConfig& config,
                      std::size_t trialId, std::uint64_t trialSeed);

struct BackdoorVerdict {
    std::vector<int> classes;  // ascending
    std::vector<double> meanRank;
    std::vector<double> rankVar;
    int top1 = 0;
    std::vector<int> top3;
    std::optional<int> flagged;
    std::size_t trials = 0;
    std::vector<TrialRanking> rankings;

    bool top1Hit(int target) const { return top1 == target; }
    bool top3Hit(int target) const;
};

BackdoorVerdict aggregateTrials(std::vector<TrialRanking> rankings, double stabilityVarMax);

/// Runs config.trials trials with seeds seed + t over all model classes.
BackdoorVerdict auditBackdoor(const Model& model, std::span<const LoraPlacement> placements,
                              const BackdoorConfig& config);

void to_json(nlohmann::json& j, const SynthesisConfig& c);
void from_json(const nlohmann::json& j, SynthesisConfig& c);
void to_json(nlohmann::json& j, const BackdoorConfig& c);
void from_json(const nlohmann::json& j, BackdoorConfig& c);
void to_json(nlohmann::json& j, const BackdoorVerdict& v);

}  // namespace lora_audit
