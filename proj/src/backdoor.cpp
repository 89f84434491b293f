// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/backdoor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "lora_audit/errors.hpp"
#include "lora_audit/geometry.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

std::string toString(Strategy strategy) {
    switch (strategy) {
        case Strategy::sparse: return "sparse";
        case Strategy::smooth: return "smooth";
        case Strategy::hybrid: return "hybrid";
    }
    return "unknown";
}

std::string toString(Corner corner) {
    switch (corner) {
        case Corner::topLeft: return "topLeft";
        case Corner::topRight: return "topRight";
        case Corner::bottomLeft: return "bottomLeft";
        case Corner::bottomRight: return "bottomRight";
    }
    return "unknown";
}

std::string toString(ScoreRegime regime) {
    switch (regime) {
        case ScoreRegime::alignmentPeak: return "alignmentPeak";
        case ScoreRegime::energyAnomaly: return "energyAnomaly";
        case ScoreRegime::conservative: return "conservative";
    }
    return "unknown";
}

void SynthesisConfig::validate() const {
    if (steps < 1) throw ValidationError("synthesis needs at least one step");
    if (!(stepSize >= 0.0) || !(noiseScale >= 0.0)) {
        throw ValidationError("step size and noise scale must be non-negative");
    }
    if (batchSize < 2) throw ValidationError("proxy batch needs at least two inputs");
    if (!(strategyBalance >= 0.0 && strategyBalance <= 1.0)) {
        throw ValidationError("strategy balance must lie in [0, 1]");
    }
    if (!(smoothnessWeight >= 0.0) || !(contrastWeight >= 0.0)) {
        throw ValidationError("penalty weights must be non-negative");
    }
}

double totalVariation(std::span<const double> image, std::size_t channels, std::size_t height,
                      std::size_t width, std::span<double> gradient) {
    double tv = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = c * height * width;
        for (std::size_t i = 0; i < height; ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                const std::size_t p = base + i * width + j;
                if (i + 1 < height) {
                    const double d = image[p + width] - image[p];
                    tv += d * d;
                    if (!gradient.empty()) {
                        gradient[p + width] += 2.0 * d;
                        gradient[p] -= 2.0 * d;
                    }
                }
                if (j + 1 < width) {
                    const double d = image[p + 1] - image[p];
                    tv += d * d;
                    if (!gradient.empty()) {
                        gradient[p + 1] += 2.0 * d;
                        gradient[p] -= 2.0 * d;
                    }
                }
            }
        }
    }
    return tv;
}

namespace {

std::vector<double> rowNorms(const Tensor& batch, std::size_t rows, std::size_t width) {
    std::vector<double> norms(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < width; ++p) s += batch.data[i * width + p] * batch.data[i * width + p];
        norms[i] = std::sqrt(s);
    }
    return norms;
}

double rowDot(const Tensor& batch, std::size_t a, std::size_t b, std::size_t width) {
    double s = 0.0;
    for (std::size_t p = 0; p < width; ++p) s += batch.data[a * width + p] * batch.data[b * width + p];
    return s;
}

// Adds weight * d/dx_i of mean_j cos(x_i, x_j) for every row i.
void addContrastGradient(const Tensor& batch, std::size_t rows, std::size_t width, double weight,
                         std::vector<double>& gradient) {
    const auto norms = rowNorms(batch, rows, width);
    const double share = weight / static_cast<double>(rows - 1);
    for (std::size_t i = 0; i < rows; ++i) {
        if (norms[i] == 0.0) continue;
        for (std::size_t j = 0; j < rows; ++j) {
            if (j == i || norms[j] == 0.0) continue;
            const double inv = 1.0 / (norms[i] * norms[j]);
            const double cos = rowDot(batch, i, j, width) * inv;
            const double self = cos / (norms[i] * norms[i]);
            for (std::size_t p = 0; p < width; ++p) {
                gradient[i * width + p] +=
                    share * (batch.data[j * width + p] * inv - self * batch.data[i * width + p]);
            }
        }
    }
}

std::vector<double> cornerMask(const Shape& sample, std::size_t maskSize, Corner corner) {
    const std::size_t channels = sample[0], height = sample[1], width = sample[2];
    const std::size_t edge = maskSize == 0 ? std::max<std::size_t>(1, std::min(height, width) / 4)
                                           : maskSize;
    if (edge > height || edge > width) {
        throw ValidationError("mask size " + std::to_string(edge) + " exceeds the image");
    }
    const bool bottom = corner == Corner::bottomLeft || corner == Corner::bottomRight;
    const bool right = corner == Corner::topRight || corner == Corner::bottomRight;
    const std::size_t row0 = bottom ? height - edge : 0, col0 = right ? width - edge : 0;
    std::vector<double> mask(channels * height * width, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = row0; i < row0 + edge; ++i) {
            for (std::size_t j = col0; j < col0 + edge; ++j) mask[(c * height + i) * width + j] = 1.0;
        }
    }
    return mask;
}

void checkClass(const Model& model, int targetClass) {
    if (targetClass < 0 || static_cast<std::size_t>(targetClass) >= model.classCount) {
        throw ValidationError("class " + std::to_string(targetClass) + " outside [0, " +
                              std::to_string(model.classCount) + ")");
    }
}

}  // namespace

double meanPairwiseCosine(const Tensor& batch) {
    if (batch.rank() == 0 || batch.dim(0) < 2) {
        throw ValidationError("pairwise similarity needs at least two inputs");
    }
    const std::size_t rows = batch.dim(0), width = batch.size() / rows;
    const auto norms = rowNorms(batch, rows, width);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = i + 1; j < rows; ++j, ++pairs) {
            if (norms[i] > 0.0 && norms[j] > 0.0) {
                total += rowDot(batch, i, j, width) / (norms[i] * norms[j]);
            }
        }
    }
    return total / static_cast<double>(pairs);
}

Tensor synthesizeProxy(const Model& model, int targetClass, Strategy strategy,
                       const SynthesisConfig& config) {
    config.validate();
    checkClass(model, targetClass);
    const Shape& sample = model.inputShape;
    if (sample.size() != 3) throw DimensionError("proxy synthesis needs (C, H, W) inputs");
    const std::size_t n = config.batchSize, width = shapeProduct(sample);

    Rng rng(config.seed);
    Shape batchShape{n};
    batchShape.insert(batchShape.end(), sample.begin(), sample.end());
    Tensor x(batchShape);
    const auto mask = cornerMask(sample, config.maskSize, config.corner);
    if (strategy == Strategy::sparse) {
        std::vector<double> background(width);
        for (double& v : background) v = rng.uniform();
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t p = 0; p < width; ++p) {
                x.data[s * width + p] = mask[p] > 0.0 ? rng.uniform() : background[p];
            }
        }
    } else {
        for (double& v : x.data) v = rng.uniform();
    }

    const std::vector<int> labels(n, targetClass);
    const double perSample = static_cast<double>(n);
    const bool smoothTerm = strategy != Strategy::sparse && config.smoothnessWeight > 0.0;
    std::vector<double> grad(x.size()), tvGrad(width);

    for (std::size_t step = 0; step < config.steps; ++step) {
        // Cross-entropy is averaged over the batch; rescale to per-sample gradients.
        const auto lg = lossAndGradients(model, x, labels, {}, PassOptions{0, false, true});
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = perSample * lg.grads.input.data[i];
        if (config.contrastWeight > 0.0) {
            addContrastGradient(x, n, width, config.contrastWeight, grad);
        }
        for (std::size_t s = 0; s < n; ++s) {
            std::span<const double> image(&x.data[s * width], width);
            if (smoothTerm) {
                std::fill(tvGrad.begin(), tvGrad.end(), 0.0);
                totalVariation(image, sample[0], sample[1], sample[2], tvGrad);
            }
            for (std::size_t p = 0; p < width; ++p) {
                const double g = grad[s * width + p];
                const double smooth = g + (smoothTerm ? config.smoothnessWeight * tvGrad[p] : 0.0);
                const double noise = config.noiseScale > 0.0 ? rng.normal() : 0.0;
                double update = 0.0, reach = 0.0;
                switch (strategy) {
                    case Strategy::sparse:
                        update = mask[p] * g;
                        reach = mask[p];
                        break;
                    case Strategy::smooth:
                        update = smooth;
                        reach = 1.0;
                        break;
                    case Strategy::hybrid:
                        update = 0.5 * mask[p] * g + 0.5 * smooth;
                        reach = 0.5 * mask[p] + 0.5;
                        break;
                }
                double& v = x.data[s * width + p];
                v = std::clamp(v - config.stepSize * update + config.noiseScale * reach * noise,
                               0.0, 1.0);
            }
        }
    }
    return x;
}

double meanConfidence(const Model& model, const Tensor& batch, int targetClass) {
    checkClass(model, targetClass);
    const Tensor probs = softmax(forward(model, batch));
    const std::size_t rows = probs.dim(0), classes = probs.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) total += probs.data[i * classes + targetClass];
    return total / static_cast<double>(rows);
}

double strategyScore(const Model& model, const Tensor& batch, int targetClass, double balance) {
    if (batch.rank() == 0 || batch.dim(0) < 2) {
        throw ValidationError("strategy score needs at least two inputs");
    }
    return balance * meanConfidence(model, batch, targetClass) +
           (1.0 - balance) * meanPairwiseCosine(batch);
}

SignatureValues signatureFromUpdates(std::span<const Tensor* const> weights,
                                     std::span<const Tensor* const> updates, NormKind norm) {
    if (weights.empty() || weights.size() != updates.size()) {
        throw ValidationError("signature needs matching, non-empty weight and update lists");
    }
    std::size_t total = 0;
    bool sameWidth = true;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i]->shape != updates[i]->shape || weights[i]->rank() != 2) {
            throw DimensionError("weights and updates must be matching matrices");
        }
        sameWidth = sameWidth && weights[i]->dim(1) == weights[0]->dim(1);
        total += weights[i]->size();
    }
    if (!sameWidth && norm == NormKind::spectral) {
        throw DimensionError("spectral signatures need matching input widths");
    }
    // Row-stacked when widths agree, flat otherwise; Frobenius values are the same.
    const std::size_t columns = sameWidth ? weights[0]->dim(1) : total;
    Tensor w({total / columns, columns}), dw({total / columns, columns});
    std::size_t offset = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        std::copy(weights[i]->data.begin(), weights[i]->data.end(), w.data.begin() + offset);
        std::copy(updates[i]->data.begin(), updates[i]->data.end(), dw.data.begin() + offset);
        offset += weights[i]->size();
    }
    const double base = matrixNorm(w, norm);
    if (base == 0.0) throw DegenerateInputError("frozen weights have zero norm");
    SignatureValues out;
    out.energy = matrixNorm(dw, norm) / base;
    if (std::all_of(dw.data.begin(), dw.data.end(), [](double v) { return v == 0.0; })) {
        out.degenerate = true;
        return out;
    }
    out.alignment = cosineAlignment(w, dw);
    return out;
}

SignatureValues classSignature(const Model& model, std::span<const LoraPlacement> placements,
                               std::size_t rank, const Tensor& proxies, int targetClass,
                               const TrainConfig& config, std::uint64_t adapterSeed,
                               NormKind norm) {
    checkClass(model, targetClass);
    if (placements.empty()) throw ValidationError("no LoRA placements given");
    std::vector<LoraAdapter> adapters;
    for (const auto& placement : placements) {
        if (placement.layerIndex >= model.layers.size()) {
            throw PlacementError("placement layer " + std::to_string(placement.layerIndex) +
                                 " out of range");
        }
        adapters.push_back(makeAdapter(model.layers[placement.layerIndex], placement, rank,
                                       Rng::derive(adapterSeed, placement.layerIndex)));
    }
    const std::vector<int> labels(proxies.dim(0), targetClass);
    const auto trajectories = fineTuneRecord(model, adapters, proxies, labels, config, norm);
    std::vector<const Tensor*> weights, updates;
    for (std::size_t i = 0; i < placements.size(); ++i) {
        weights.push_back(&model.layers[placements[i].layerIndex].weights);
        updates.push_back(&trajectories[i].finalDelta());
    }
    return signatureFromUpdates(weights, updates, norm);
}

ScoringResult scoreClasses(std::span<ClassSignature> signatures, const ScoringConfig& config) {
    if (signatures.size() < 2) throw ValidationError("scoring needs at least two classes");
    if (!(config.beta1 > config.beta2)) throw ValidationError("beta1 must exceed beta2");
    const std::size_t k = signatures.size();
    std::vector<double> energy(k), alignment(k);
    for (std::size_t i = 0; i < k; ++i) {
        energy[i] = signatures[i].energy;
        alignment[i] = signatures[i].alignment;
    }
    const auto zE = robustZScores(energy);
    const auto zC = robustZScores(alignment);
    std::vector<double> absE(k);
    for (std::size_t i = 0; i < k; ++i) absE[i] = std::abs(zE[i]);

    ScoringResult result;
    result.tauAlignment = std::max(robustStats(zC).mad, config.tauFloor);
    result.tauEnergy = std::max(robustStats(zE).mad, config.tauFloor);

    auto maxOthers = [k](const std::vector<double>& v, std::size_t skip) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < k; ++i) {
            if (i != skip) m = std::max(m, v[i]);
        }
        return m;
    };

    std::size_t peaks = 0;
    for (std::size_t i = 0; i < k; ++i) {
        if (zC[i] > 0.0 && zC[i] - maxOthers(zC, i) >= result.tauAlignment) ++peaks;
    }
    const auto energyStats = robustStats(zE);
    std::size_t anomalies = 0;
    for (std::size_t i = 0; i < k; ++i) {
        if (zE[i] <= energyStats.median - energyStats.mad &&
            absE[i] - maxOthers(absE, i) >= result.tauEnergy) {
            ++anomalies;
        }
    }
    if (peaks == 1) {
        result.regime = ScoreRegime::alignmentPeak;
    } else if (anomalies == 1) {
        result.regime = ScoreRegime::energyAnomaly;
    } else {
        result.regime = ScoreRegime::conservative;
    }

    for (std::size_t i = 0; i < k; ++i) {
        auto& s = signatures[i];
        s.zEnergy = zE[i];
        s.zAlignment = zC[i];
        s.regime = result.regime;
        s.score = result.regime == ScoreRegime::alignmentPeak
                      ? config.beta1 * zC[i] + config.beta2 * absE[i]
                      : config.beta1 * absE[i] + config.beta2 * std::max(zC[i], 0.0);
    }
    return result;
}

std::vector<int> rankByScore(std::span<const ClassSignature> signatures) {
    std::vector<const ClassSignature*> order;
    for (const auto& s : signatures) order.push_back(&s);
    std::sort(order.begin(), order.end(), [](const ClassSignature* a, const ClassSignature* b) {
        if (a->score != b->score) return a->score > b->score;
        return a->classId < b->classId;
    });
    std::vector<int> ranked;
    for (const auto* s : order) ranked.push_back(s->classId);
    return ranked;
}

std::size_t TrialRanking::rankOf(int classId) const {
    const auto it = std::find(rankedClasses.begin(), rankedClasses.end(), classId);
    if (it == rankedClasses.end()) throw ValidationError("class not ranked in this trial");
    return static_cast<std::size_t>(it - rankedClasses.begin()) + 1;
}

void BackdoorConfig::validate() const {
    synthesis.validate();
    signatureTraining.validate();
    if (!(scoring.beta1 > scoring.beta2)) throw ValidationError("beta1 must exceed beta2");
    if (!(scoring.tauFloor >= 0.0)) throw ValidationError("tau floor must be non-negative");
    if (rank == 0) throw ValidationError("rank must be >= 1");
    if (trials == 0) throw ValidationError("at least one trial is required");
    if (!(stabilityVarMax >= 0.0)) throw ValidationError("stabilityVarMax must be >= 0");
}

TrialRanking runTrial(const Model& model, std::span<const LoraPlacement> placements,
                      std::span<const int> candidateClasses, const BackdoorConfig& config,
                      std::size_t trialId, std::uint64_t trialSeed) {
    config.validate();
    if (candidateClasses.size() < 2) throw ValidationError("need at least two candidate classes");
    TrialRanking trial;
    trial.trialId = trialId;
    trial.seed = trialSeed;
    TrainConfig training = config.signatureTraining;
    training.seed = Rng::derive(trialSeed, 0x7E);
    const std::uint64_t adapterSeed = Rng::derive(trialSeed, 0xAD);

    for (int c : candidateClasses) {
        ClassSignature sig;
        sig.classId = c;
        Tensor best;
        bool first = true;
        auto consider = [&](Strategy strategy, Corner corner) {
            SynthesisConfig synthesis = config.synthesis;
            synthesis.corner = corner;
            synthesis.seed = Rng::derive(trialSeed, static_cast<std::uint64_t>(c) * 16 +
                                                        static_cast<std::uint64_t>(strategy) * 4 +
                                                        static_cast<std::uint64_t>(corner));
            Tensor proxies = synthesizeProxy(model, c, strategy, synthesis);
            const double score = strategyScore(model, proxies, c, synthesis.strategyBalance);
            if (first || score > sig.strategyScore) {
                sig.strategy = strategy;
                sig.corner = corner;
                sig.strategyScore = score;
                best = std::move(proxies);
                first = false;
            }
        };
        for (Corner corner : kCorners) consider(Strategy::sparse, corner);
        consider(Strategy::hybrid, sig.corner);
        consider(Strategy::smooth, Corner::bottomRight);

        const auto values = classSignature(model, placements, config.rank, best, c, training,
                                           adapterSeed, config.norm);
        sig.energy = values.energy;
        sig.alignment = values.alignment;
        sig.degenerate = values.degenerate;
        trial.perClass.push_back(sig);
    }
    trial.scoring = scoreClasses(trial.perClass, config.scoring);
    trial.rankedClasses = rankByScore(trial.perClass);
    return trial;
}

bool BackdoorVerdict::top3Hit(int target) const {
    return std::find(top3.begin(), top3.end(), target) != top3.end();
}

BackdoorVerdict aggregateTrials(std::vector<TrialRanking> rankings, double stabilityVarMax) {
    if (rankings.empty()) throw ValidationError("no trials to aggregate");
    BackdoorVerdict v;
    v.classes = rankings.front().rankedClasses;
    std::sort(v.classes.begin(), v.classes.end());
    for (const auto& r : rankings) {
        std::vector<int> sorted = r.rankedClasses;
        std::sort(sorted.begin(), sorted.end());
        if (sorted != v.classes) throw ValidationError("trials rank different class sets");
    }
    const std::size_t k = v.classes.size();
    const double t = static_cast<double>(rankings.size());
    v.meanRank.assign(k, 0.0);
    v.rankVar.assign(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (const auto& r : rankings) v.meanRank[i] += static_cast<double>(r.rankOf(v.classes[i]));
        v.meanRank[i] /= t;
        for (const auto& r : rankings) {
            const double d = static_cast<double>(r.rankOf(v.classes[i])) - v.meanRank[i];
            v.rankVar[i] += d * d;
        }
        v.rankVar[i] /= t;
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (v.meanRank[a] != v.meanRank[b]) return v.meanRank[a] < v.meanRank[b];
        if (v.rankVar[a] != v.rankVar[b]) return v.rankVar[a] < v.rankVar[b];
        return v.classes[a] < v.classes[b];
    });
    v.top1 = v.classes[order[0]];
    for (std::size_t i = 0; i < std::min<std::size_t>(3, k); ++i) v.top3.push_back(v.classes[order[i]]);
    const bool strictlyMinimal = k == 1 || v.meanRank[order[0]] < v.meanRank[order[1]];
    if (strictlyMinimal && v.rankVar[order[0]] <= stabilityVarMax) v.flagged = v.top1;
    v.trials = rankings.size();
    v.rankings = std::move(rankings);
    return v;
}

BackdoorVerdict auditBackdoor(const Model& model, std::span<const LoraPlacement> placements,
                              const BackdoorConfig& config) {
    config.validate();
    std::vector<int> classes(model.classCount);
    std::iota(classes.begin(), classes.end(), 0);
    std::vector<TrialRanking> rankings;
    for (std::size_t t = 0; t < config.trials; ++t) {
        rankings.push_back(runTrial(model, placements, classes, config, t, config.seed + t));
    }
    return aggregateTrials(std::move(rankings), config.stabilityVarMax);
}

void to_json(nlohmann::json& j, const SynthesisConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"stepSize", c.stepSize},
                       {"noiseScale", c.noiseScale},
                       {"batchSize", c.batchSize},
                       {"strategyBalance", c.strategyBalance},
                       {"maskSize", c.maskSize},
                       {"smoothnessWeight", c.smoothnessWeight},
                       {"contrastWeight", c.contrastWeight}};
}

void from_json(const nlohmann::json& j, SynthesisConfig& c) {
    const SynthesisConfig d;
    c.steps = j.value("steps", d.steps);
    c.stepSize = j.value("stepSize", d.stepSize);
    c.noiseScale = j.value("noiseScale", d.noiseScale);
    c.batchSize = j.value("batchSize", d.batchSize);
    c.strategyBalance = j.value("strategyBalance", d.strategyBalance);
    c.maskSize = j.value("maskSize", d.maskSize);
    c.smoothnessWeight = j.value("smoothnessWeight", d.smoothnessWeight);
    c.contrastWeight = j.value("contrastWeight", d.contrastWeight);
}

void to_json(nlohmann::json& j, const BackdoorConfig& c) {
    j = nlohmann::json{{"synthesis", c.synthesis},
                       {"signatureTraining",
                        {{"learningRate", c.signatureTraining.learningRate},
                         {"epochs", c.signatureTraining.epochs},
                         {"batchSize", c.signatureTraining.batchSize},
                         {"optimizer", toString(c.signatureTraining.optimizer)}}},
                       {"beta1", c.scoring.beta1},
                       {"beta2", c.scoring.beta2},
                       {"tauFloor", c.scoring.tauFloor},
                       {"rank", c.rank},
                       {"trials", c.trials},
                       {"stabilityVarMax", c.stabilityVarMax},
                       {"seed", c.seed},
                       {"norm", c.norm == NormKind::spectral ? "spectral" : "frobenius"}};
}

void from_json(const nlohmann::json& j, BackdoorConfig& c) {
    const BackdoorConfig d;
    c.synthesis = j.value("synthesis", nlohmann::json::object()).get<SynthesisConfig>();
    const auto t = j.value("signatureTraining", nlohmann::json::object());
    c.signatureTraining.learningRate = t.value("learningRate", d.signatureTraining.learningRate);
    c.signatureTraining.epochs = t.value("epochs", d.signatureTraining.epochs);
    c.signatureTraining.batchSize = t.value("batchSize", d.signatureTraining.batchSize);
    c.signatureTraining.optimizer =
        optimizerKindFromString(t.value("optimizer", toString(d.signatureTraining.optimizer)));
    c.scoring.beta1 = j.value("beta1", d.scoring.beta1);
    c.scoring.beta2 = j.value("beta2", d.scoring.beta2);
    c.scoring.tauFloor = j.value("tauFloor", d.scoring.tauFloor);
    c.rank = j.value("rank", d.rank);
    c.trials = j.value("trials", d.trials);
    c.stabilityVarMax = j.value("stabilityVarMax", d.stabilityVarMax);
    c.seed = j.value("seed", d.seed);
    const std::string norm = j.value("norm", std::string("frobenius"));
    if (norm != "frobenius" && norm != "spectral") {
        throw ValidationError("norm must be frobenius or spectral, got " + norm);
    }
    c.norm = norm == "spectral" ? NormKind::spectral : NormKind::frobenius;
}

void to_json(nlohmann::json& j, const BackdoorVerdict& v) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& r : v.rankings) {
        nlohmann::json classes = nlohmann::json::array();
        for (const auto& s : r.perClass) {
            classes.push_back({{"classId", s.classId},
                               {"energy", s.energy},
                               {"alignment", s.alignment},
                               {"degenerate", s.degenerate},
                               {"zEnergy", s.zEnergy},
                               {"zAlignment", s.zAlignment},
                               {"score", s.score},
                               {"strategy", toString(s.strategy)},
                               {"corner", toString(s.corner)},
                               {"strategyScore", s.strategyScore}});
        }
        trials.push_back({{"trialId", r.trialId},
                          {"seed", r.seed},
                          {"regime", toString(r.scoring.regime)},
                          {"tauAlignment", r.scoring.tauAlignment},
                          {"tauEnergy", r.scoring.tauEnergy},
                          {"rankedClasses", r.rankedClasses},
                          {"classes", std::move(classes)}});
    }
    nlohmann::json table = nlohmann::json::array();
    for (std::size_t i = 0; i < v.classes.size(); ++i) {
        table.push_back(
            {{"classId", v.classes[i]}, {"meanRank", v.meanRank[i]}, {"rankVar", v.rankVar[i]}});
    }
    j = nlohmann::json{{"top1", v.top1},
                       {"top3", v.top3},
                       {"flagged", v.flagged ? nlohmann::json(*v.flagged) : nlohmann::json()},
                       {"trials", v.trials},
                       {"rankTable", std::move(table)},
                       {"trialRankings", std::move(trials)}};
}

}  // namespace lora_audit
