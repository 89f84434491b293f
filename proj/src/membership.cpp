// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/membership.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "lora_audit/errors.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

std::string toString(Regime regime) {
    switch (regime) {
        case Regime::coherent: return "coherent";
        case Regime::scaleVarying: return "scaleVarying";
        case Regime::chaotic: return "chaotic";
    }
    return "unknown";
}

std::string toString(Decision decision) {
    return decision == Decision::member ? "member" : "nonMember";
}

Prototypes defaultPrototypes() {
    return {RegimePrototype{Regime::coherent, -1.0, -1.0},
            RegimePrototype{Regime::scaleVarying, 0.0, 0.0},
            RegimePrototype{Regime::chaotic, 1.0, 1.0}};
}

void MembershipConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ValidationError(std::string(name) + " must be positive and finite");
        }
    };
    positive(lambdaE, "lambdaE");
    positive(lambdaC, "lambdaC");
    if (!(lambdaE > lambdaC)) throw ValidationError("lambdaE must exceed lambdaC");
    positive(temperature, "temperature");
    positive(alphaThreshold, "alphaThreshold");
    positive(beta1, "beta1");
    positive(beta2, "beta2");
    positive(beta3, "beta3");
    positive(epsilon, "epsilon");
    if (!std::isfinite(kappa0) || !std::isfinite(gamma)) {
        throw ValidationError("kappa0 and gamma must be finite");
    }
    if (!(pivotRatio > 0.0 && pivotRatio < 1.0)) {
        throw ValidationError("pivotRatio must lie in (0, 1)");
    }
    if (!(neighbourDropout > 0.0 && neighbourDropout < 1.0)) {
        throw ValidationError("neighbourDropout must lie in (0, 1)");
    }
    if (rank == 0) throw ValidationError("rank must be >= 1");
    trainConfig().validate();
}

TrainConfig MembershipConfig::trainConfig() const {
    return TrainConfig{learningRate, epochs, batchSize, Rng::derive(seed, 1), OptimizerKind::sgd};
}

RegimeAssignment regimeWeights(double energy, double chaos, const Prototypes& prototypes,
                               const MembershipConfig& config) {
    RegimeAssignment out;
    double lowest = 0.0;
    for (std::size_t r = 0; r < kRegimeCount; ++r) {
        const double de = energy - prototypes[r].energy;
        const double dc = chaos - prototypes[r].chaos;
        out.distances[r] = std::sqrt(config.lambdaE * de * de + config.lambdaC * dc * dc);
        lowest = r == 0 ? out.distances[r] : std::min(lowest, out.distances[r]);
    }
    // Shift by the smallest distance so the largest exponent is exactly 0.
    double total = 0.0;
    for (std::size_t r = 0; r < kRegimeCount; ++r) {
        out.weights[r] = std::exp(-(out.distances[r] - lowest) / config.temperature);
        total += out.weights[r];
    }
    for (double& w : out.weights) w /= total;
    return out;
}

std::array<double, 2> standardizedCoordinates(const PhysicsEmbedding& emb,
                                              const ExpertPivots& pivots, double epsilon) {
    auto squash = [epsilon](double x, double pivot) {
        return 2.0 * x / (x + pivot + epsilon) - 1.0;
    };
    return {squash(emb.energy, pivots.kappa1), squash(emb.chaos, pivots.kappa3)};
}

double expertCoherent(const PhysicsEmbedding& emb, const ExpertPivots& p) {
    return 0.5 * sigmoid(p.beta1 * (p.kappa1 - emb.relativeEnergy)) +
           0.5 * sigmoid(p.beta3 * (p.kappa3 - emb.variation));
}

double expertScaleInvariant(const PhysicsEmbedding& emb, const ExpertPivots& p) {
    return 0.5 * sigmoid(p.beta1 * (p.kappa1 - emb.relativeEnergy)) +
           0.5 * sigmoid(p.beta2 * (p.kappa2 - emb.logNormRatio));
}

double expertChaotic(const PhysicsEmbedding& emb, const ExpertPivots& p) {
    const double cv = emb.variation;
    const double omega = 1.0 / (1.0 + cv);
    const double pivot = p.kappa0 + p.gamma * cv;
    return omega * sigmoid(p.beta1 * (pivot - emb.relativeEnergy)) +
           (1.0 - omega) * sigmoid(p.beta2 * (p.kappa2 - emb.logNormRatio));
}

std::array<double, kRegimeCount> expertScores(const PhysicsEmbedding& emb,
                                              const ExpertPivots& pivots) {
    return {expertCoherent(emb, pivots), expertScaleInvariant(emb, pivots),
            expertChaotic(emb, pivots)};
}

double membershipScore(std::span<const double, kRegimeCount> weights,
                       std::span<const double, kRegimeCount> scores) {
    double s = 0.0;
    for (std::size_t r = 0; r < kRegimeCount; ++r) s += weights[r] * scores[r];
    return std::clamp(s, 0.0, 1.0);
}

double decisionThreshold(std::size_t epochs, double alphaThreshold) {
    return 0.5 + alphaThreshold * std::log1p(static_cast<double>(epochs));
}

double linearDriftVariation(std::size_t epochs) {
    if (epochs == 0) return 0.0;
    const double t = static_cast<double>(epochs);
    return std::sqrt((t * t - 1.0) / 12.0) / ((t + 1.0) / 2.0);
}

ExpertPivots derivePivots(const PhysicsEmbedding& neighbour, std::size_t epochs,
                          const MembershipConfig& config) {
    ExpertPivots p;
    p.kappa1 = std::max(config.pivotRatio * neighbour.relativeEnergy, config.epsilon);
    p.kappa2 = neighbour.logNormRatio + std::log(config.pivotRatio);
    p.kappa3 = linearDriftVariation(epochs);
    p.kappa0 = config.kappa0 * p.kappa1;
    p.gamma = config.gamma * p.kappa1;
    // Energy sigmoids act on E_rel / kappa1 so their sharpness does not depend on scale.
    p.beta1 = config.beta1 / p.kappa1;
    p.beta2 = config.beta2;
    p.beta3 = config.beta3;
    return p;
}

MembershipVerdict combineLayers(std::vector<LayerAudit> layers, std::size_t epochs,
                                const MembershipConfig& config) {
    if (layers.empty()) throw ValidationError("no audited layers");
    MembershipVerdict v;
    const double share = 1.0 / static_cast<double>(layers.size());
    for (const auto& layer : layers) {
        for (std::size_t r = 0; r < kRegimeCount; ++r) {
            v.weights[r] += share * layer.regimes.weights[r];
            v.experts[r] += share * layer.experts[r];
        }
    }
    v.score = membershipScore(v.weights, v.experts);
    v.threshold = decisionThreshold(epochs, config.alphaThreshold);
    v.decision = v.score > v.threshold ? Decision::member : Decision::nonMember;
    v.embedding = layers.front().embedding;
    v.layers = std::move(layers);
    return v;
}

Tensor dropoutNeighbour(const Tensor& batch, double probability, std::uint64_t seed) {
    Tensor out = batch;
    Rng rng(seed);
    for (double& v : out.data) {
        if (rng.uniform() < probability) v = 0.0;
    }
    return out;
}

namespace {

bool finite(const PhysicsEmbedding& e) {
    return std::isfinite(e.energy) && std::isfinite(e.chaos) && std::isfinite(e.logNormRatio);
}

std::vector<LoraAdapter> freshAdapters(const Model& model,
                                       std::span<const LoraPlacement> placements,
                                       const MembershipConfig& config) {
    std::vector<LoraAdapter> adapters;
    for (const auto& placement : placements) {
        if (placement.layerIndex >= model.layers.size()) {
            throw PlacementError("placement layer " + std::to_string(placement.layerIndex) +
                                 " out of range");
        }
        adapters.push_back(makeAdapter(model.layers[placement.layerIndex], placement,
                                       config.rank,
                                       Rng::derive(config.seed, 100 + placement.layerIndex)));
    }
    return adapters;
}

}  // namespace

MembershipVerdict auditMembership(const Model& model, std::span<const LoraPlacement> placements,
                                  const Tensor& batch, std::span<const int> labels,
                                  const MembershipConfig& config) {
    config.validate();
    if (placements.empty()) throw ValidationError("no LoRA placements given");
    const TrainConfig train = config.trainConfig();

    auto adapters = freshAdapters(model, placements, config);
    const auto trajectories = fineTuneRecord(model, adapters, batch, labels, train, config.norm);

    const Tensor neighbour =
        dropoutNeighbour(batch, config.neighbourDropout, Rng::derive(config.seed, 2));
    auto neighbourAdapters = freshAdapters(model, placements, config);
    const auto neighbourTrajectories =
        fineTuneRecord(model, neighbourAdapters, neighbour, labels, train, config.norm);

    const Prototypes prototypes = defaultPrototypes();
    std::vector<LayerAudit> layers;
    for (std::size_t i = 0; i < placements.size(); ++i) {
        LayerAudit layer;
        layer.layerIndex = placements[i].layerIndex;
        layer.embedding = trajectoryStats(trajectories[i], config.epsilon);
        layer.neighbour = trajectoryStats(neighbourTrajectories[i], config.epsilon);
        if (!finite(layer.embedding) || !finite(layer.neighbour)) {
            throw DegenerateInputError("audit fine-tuning diverged on layer " +
                                       std::to_string(layer.layerIndex) +
                                       "; lower the audit learning rate");
        }
        layer.pivots = derivePivots(layer.neighbour, config.epochs, config);
        layer.coordinates = standardizedCoordinates(layer.embedding, layer.pivots, config.epsilon);
        layer.regimes =
            regimeWeights(layer.coordinates[0], layer.coordinates[1], prototypes, config);
        layer.experts = expertScores(layer.embedding, layer.pivots);
        layer.norms = trajectories[i].norms;
        layers.push_back(std::move(layer));
    }
    return combineLayers(std::move(layers), config.epochs, config);
}

void to_json(nlohmann::json& j, const PhysicsEmbedding& e) {
    j = nlohmann::json{{"mu", e.mu},
                       {"sigma", e.sigma},
                       {"energy", e.energy},
                       {"chaos", e.chaos},
                       {"relativeEnergy", e.relativeEnergy},
                       {"logNormRatio", e.logNormRatio},
                       {"variation", e.variation},
                       {"epsilon", e.epsilon}};
}

void to_json(nlohmann::json& j, const MembershipConfig& c) {
    j = nlohmann::json{{"lambdaE", c.lambdaE},
                       {"lambdaC", c.lambdaC},
                       {"temperature", c.temperature},
                       {"alphaThreshold", c.alphaThreshold},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"beta3", c.beta3},
                       {"kappa0", c.kappa0},
                       {"gamma", c.gamma},
                       {"epsilon", c.epsilon},
                       {"pivotRatio", c.pivotRatio},
                       {"neighbourDropout", c.neighbourDropout},
                       {"rank", c.rank},
                       {"learningRate", c.learningRate},
                       {"epochs", c.epochs},
                       {"batchSize", c.batchSize},
                       {"seed", c.seed},
                       {"norm", c.norm == NormKind::spectral ? "spectral" : "frobenius"}};
}

void from_json(const nlohmann::json& j, MembershipConfig& c) {
    const MembershipConfig d;
    c.lambdaE = j.value("lambdaE", d.lambdaE);
    c.lambdaC = j.value("lambdaC", d.lambdaC);
    c.temperature = j.value("temperature", d.temperature);
    c.alphaThreshold = j.value("alphaThreshold", d.alphaThreshold);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.beta3 = j.value("beta3", d.beta3);
    c.kappa0 = j.value("kappa0", d.kappa0);
    c.gamma = j.value("gamma", d.gamma);
    c.epsilon = j.value("epsilon", d.epsilon);
    c.pivotRatio = j.value("pivotRatio", d.pivotRatio);
    c.neighbourDropout = j.value("neighbourDropout", d.neighbourDropout);
    c.rank = j.value("rank", d.rank);
    c.learningRate = j.value("learningRate", d.learningRate);
    c.epochs = j.value("epochs", d.epochs);
    c.batchSize = j.value("batchSize", d.batchSize);
    c.seed = j.value("seed", d.seed);
    const std::string norm = j.value("norm", std::string("frobenius"));
    if (norm != "frobenius" && norm != "spectral") {
        throw ValidationError("norm must be frobenius or spectral, got " + norm);
    }
    c.norm = norm == "spectral" ? NormKind::spectral : NormKind::frobenius;
}

namespace {

nlohmann::json regimeObject(const std::array<double, kRegimeCount>& values) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t r = 0; r < kRegimeCount; ++r) o[toString(static_cast<Regime>(r))] = values[r];
    return o;
}

}  // namespace

void to_json(nlohmann::json& j, const MembershipVerdict& v) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : v.layers) {
        layers.push_back({{"layerIndex", l.layerIndex},
                          {"embedding", l.embedding},
                          {"neighbourEmbedding", l.neighbour},
                          {"pivots",
                           {{"kappa0", l.pivots.kappa0},
                            {"kappa1", l.pivots.kappa1},
                            {"kappa2", l.pivots.kappa2},
                            {"kappa3", l.pivots.kappa3},
                            {"gamma", l.pivots.gamma},
                            {"beta1", l.pivots.beta1}}},
                          {"standardized", {l.coordinates[0], l.coordinates[1]}},
                          {"distances", regimeObject(l.regimes.distances)},
                          {"weights", regimeObject(l.regimes.weights)},
                          {"experts", regimeObject(l.experts)},
                          {"norms", l.norms}});
    }
    j = nlohmann::json{{"score", v.score},
                       {"threshold", v.threshold},
                       {"decision", toString(v.decision)},
                       {"weights", regimeObject(v.weights)},
                       {"experts", regimeObject(v.experts)},
                       {"embedding", v.embedding},
                       {"layers", std::move(layers)}};
}

}  // namespace lora_audit
