// SPDX-License-Identifier: Apache-2.0
// Independent reference checks shared by the unit suite and the acceptance run.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lora_audit/backdoor.hpp"
#include "lora_audit/geometry.hpp"
#include "lora_audit/membership.hpp"
#include "lora_audit/nn.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit::oracle {

inline Tensor randomTensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Central difference with a four-point consistency check: when the two stencils disagree
// the perturbation crossed a ReLU kink and the entry is skipped.
struct NumericDerivative {
    double value = 0.0;
    bool smooth = true;
};

inline NumericDerivative centralDifference(double& slot, const std::function<double()>& loss) {
    constexpr double h = 1e-5;
    const double saved = slot;
    auto at = [&](double offset) {
        slot = saved + offset;
        return loss();
    };
    const double p1 = at(h), m1 = at(-h), p2 = at(2 * h), m2 = at(-2 * h);
    slot = saved;
    const double d1 = (p1 - m1) / (2 * h);
    const double d2 = (p2 - m2) / (4 * h);
    const double scale = std::max({std::abs(d1), std::abs(d2), 1e-6});
    return {(8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h), std::abs(d1 - d2) / scale < 1e-3};
}

inline double relativeError(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradientReport {
    std::size_t configurations = 0;
    std::size_t withLowRank = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::size_t shapeMismatches = 0;
    double worst = 0.0;
};

inline void compareEntries(const Tensor& analytic, Tensor& param, const std::function<double()>& loss,
                           GradientReport& report) {
    if (analytic.shape != param.shape) {
        ++report.shapeMismatches;
        return;
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
        const auto numeric = centralDifference(param.data[i], loss);
        if (!numeric.smooth) {
            ++report.skipped;
            continue;
        }
        ++report.checked;
        report.worst = std::max(report.worst, relativeError(analytic.data[i], numeric.value));
    }
}

inline Model randomArchitecture(Rng& rng, std::uint64_t seed) {
    const std::size_t classes = 2 + rng.below(3);
    if (rng.below(2) == 0) {
        const Shape shape{1 + rng.below(2), 2 + rng.below(3), 2 + rng.below(3)};
        std::vector<std::size_t> hidden;
        for (std::size_t i = 0, n = rng.below(3); i < n; ++i) hidden.push_back(2 + rng.below(5));
        return makeMlp(shape, hidden, classes, seed);
    }
    const std::size_t edge = 5 + rng.below(3);
    const Shape shape{1 + rng.below(2), edge, edge};
    return makeCnn(shape, 1 + rng.below(3), 1 + rng.below(3), 2 + rng.below(2), classes, seed,
                   rng.below(2) == 0 ? 0 : 3);
}

// Random MLP and CNN architectures, half of them with a low-rank term on a dense layer.
// Every weight, bias, low-rank factor and input entry is compared against finite differences.
inline GradientReport gradientOracle(std::size_t configurations, std::uint64_t seed) {
    GradientReport report;
    for (std::uint64_t c = 0; c < configurations; ++c) {
        Rng rng(Rng::derive(seed, c));
        Model model = randomArchitecture(rng, c);
        for (auto& layer : model.layers) {
            for (double& b : layer.bias.data) b = rng.uniform(-0.5, 0.5);
        }
        const std::size_t n = 2 + rng.below(3);
        Shape batchShape{n};
        batchShape.insert(batchShape.end(), model.inputShape.begin(), model.inputShape.end());
        Tensor batch = randomTensor(batchShape, rng);
        std::vector<int> labels(n);
        for (int& l : labels) l = static_cast<int>(rng.below(model.classCount));

        std::vector<LowRankTerm> terms;
        Tensor down, up;
        std::vector<std::size_t> dense;
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            if (model.layers[i].kind == LayerKind::dense) dense.push_back(i);
        }
        if (rng.below(2) == 0) {
            const std::size_t li = dense[rng.below(dense.size())];
            const Layer& layer = model.layers[li];
            const std::size_t r = 1 + rng.below(2);
            down = randomTensor({r, layer.inFeatures()}, rng);
            up = randomTensor({layer.outFeatures(), r}, rng);
            terms.push_back({li, &down, &up, 1.0 / static_cast<double>(r)});
            ++report.withLowRank;
        }

        PassOptions options;
        options.inputGradient = true;
        const auto result = lossAndGradients(model, batch, labels, terms, options);
        auto loss = [&] { return lossAndGradients(model, batch, labels, terms, {}).loss; };
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            if (!model.layers[i].hasParameters()) continue;
            compareEntries(result.grads.weights[i], model.layers[i].weights, loss, report);
            compareEntries(result.grads.bias[i], model.layers[i].bias, loss, report);
        }
        if (!terms.empty()) {
            compareEntries(result.grads.down[0], down, loss, report);
            compareEntries(result.grads.up[0], up, loss, report);
        }
        compareEntries(result.grads.input, batch, loss, report);
        ++report.configurations;
    }
    return report;
}

// Full sort, then the textbook definitions.
inline double bruteMedian(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

inline double bruteMad(const std::vector<double>& v) {
    const double m = bruteMedian(v);
    std::vector<double> dev;
    for (double x : v) dev.push_back(std::abs(x - m));
    return bruteMedian(dev);
}

struct RobustReport {
    std::size_t vectors = 0;
    std::size_t mismatches = 0;
};

// Random vectors, a quarter of them with heavy ties. Any difference from the brute-force
// median, MAD or z-score counts as a mismatch.
inline RobustReport robustStatsOracle(std::size_t vectors, std::uint64_t seed) {
    Rng rng(seed);
    RobustReport report;
    for (std::size_t trial = 0; trial < vectors; ++trial) {
        std::vector<double> v(2 + rng.below(40));
        const bool ties = rng.below(4) == 0;
        for (double& x : v) x = ties ? static_cast<double>(rng.below(5)) : rng.uniform(-10.0, 10.0);
        const double m = bruteMedian(v);
        const double mad = bruteMad(v);
        const auto rs = robustStats(v);
        bool ok = median(v) == m && rs.median == m && rs.mad == mad;
        const auto z = robustZScores(v);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double expected = mad == 0.0 ? 0.0 : kMadConsistency * (v[i] - m) / mad;
            ok = ok && z[i] == expected && robustZ(v, i) == expected;
        }
        ++report.vectors;
        if (!ok) ++report.mismatches;
    }
    return report;
}

inline std::vector<ClassSignature> signatures(const std::vector<double>& energy,
                                              const std::vector<double>& alignment) {
    std::vector<ClassSignature> out;
    for (std::size_t i = 0; i < energy.size(); ++i) {
        ClassSignature s;
        s.classId = static_cast<int>(i);
        s.energy = energy[i];
        s.alignment = alignment[i];
        out.push_back(s);
    }
    return out;
}

inline PhysicsEmbedding embedding(double relativeEnergy, double cv, double logRatio) {
    PhysicsEmbedding e;
    e.relativeEnergy = relativeEnergy;
    e.energy = relativeEnergy;
    e.variation = cv;
    e.chaos = cv;
    e.logNormRatio = logRatio;
    return e;
}

struct InvariantReport {
    std::size_t cases = 0;
    std::size_t violations = 0;
};

// Membership: regime weights sum to one and every score lies in [0, 1]; the threshold
// grows with the trajectory length. Backdoor: class scores are invariant to shifting all
// energies and to permuting the class order.
inline InvariantReport scoringInvariants(std::size_t cases, std::uint64_t seed) {
    Rng rng(seed);
    InvariantReport report;
    const MembershipConfig mcfg;
    const ScoringConfig scfg;
    auto expect = [&](bool condition) {
        if (!condition) ++report.violations;
    };
    for (std::size_t trial = 0; trial < cases; ++trial) {
        const auto neighbour =
            embedding(rng.uniform(1e-4, 2.0), rng.uniform(0.0, 3.0), rng.uniform(-8.0, 2.0));
        const std::size_t steps = 1 + rng.below(30);
        const auto pivots = derivePivots(neighbour, steps, mcfg);
        const auto e = embedding(rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0), rng.uniform(-20.0, 5.0));
        const auto coords = standardizedCoordinates(e, pivots, mcfg.epsilon);
        const auto w = regimeWeights(coords[0], coords[1], defaultPrototypes(), mcfg);
        expect(std::abs(w.weights[0] + w.weights[1] + w.weights[2] - 1.0) <= 1e-9);
        const auto s = expertScores(e, pivots);
        for (double v : s) expect(v >= 0.0 && v <= 1.0);
        const double score = membershipScore(w.weights, s);
        expect(score >= 0.0 && score <= 1.0);
        expect(decisionThreshold(steps + 1, mcfg.alphaThreshold) >
               decisionThreshold(steps, mcfg.alphaThreshold));

        const std::size_t k = 2 + rng.below(10);
        std::vector<double> energy(k), alignment(k);
        for (std::size_t i = 0; i < k; ++i) {
            energy[i] = rng.uniform(0.0, 2.0);
            alignment[i] = rng.uniform(-1.0, 1.0);
        }
        auto base = signatures(energy, alignment);
        scoreClasses(base, scfg);
        std::vector<double> shifted = energy;
        const double shift = rng.uniform(-5.0, 5.0);
        for (double& v : shifted) v += shift;
        auto moved = signatures(shifted, alignment);
        scoreClasses(moved, scfg);
        for (std::size_t i = 0; i < k; ++i) {
            expect(std::abs(moved[i].zEnergy - base[i].zEnergy) <= 1e-9);
            expect(std::abs(moved[i].score - base[i].score) <= 1e-9);
        }
        std::vector<std::size_t> order(k);
        for (std::size_t i = 0; i < k; ++i) order[i] = i;
        rng.shuffle(std::span(order));
        std::vector<ClassSignature> permuted;
        for (std::size_t i : order) permuted.push_back(signatures(energy, alignment)[i]);
        scoreClasses(permuted, scfg);
        for (const auto& p : permuted) expect(p.score == base[static_cast<std::size_t>(p.classId)].score);
        expect(rankByScore(permuted) == rankByScore(base));
        ++report.cases;
    }
    return report;
}

}  // namespace lora_audit::oracle
