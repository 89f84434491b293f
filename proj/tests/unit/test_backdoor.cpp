// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lora_audit/backdoor.hpp"
#include "lora_audit/data.hpp"
#include "lora_audit/errors.hpp"
#include "lora_audit/geometry.hpp"
#include "lora_audit/random.hpp"

using namespace lora_audit;

namespace {

const Model& trainedModel() {
    static const Model model = [] {
        const Dataset data = genSynthetic(4, 40, 8, 0.3, 6);
        Model m = makeCnn(data.sampleShape(), 2, 3, 3, 4, 8, 8);
        train(m, data, TrainConfig{0.01, 5, 16, 2, OptimizerKind::adam});
        return m;
    }();
    return model;
}

std::vector<ClassSignature> signatures(const std::vector<double>& energy,
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

TrialRanking trialWithRanks(std::size_t id, std::vector<int> ranked) {
    TrialRanking t;
    t.trialId = id;
    t.rankedClasses = std::move(ranked);
    return t;
}

}  // namespace

TEST_CASE("no step and no noise returns the seeded start") {
    SynthesisConfig cfg;
    cfg.seed = 4;
    cfg.stepSize = 0.0;
    cfg.noiseScale = 0.0;
    cfg.steps = 1;
    for (Strategy s : kStrategies) {
        const Tensor a = synthesizeProxy(trainedModel(), 1, s, cfg);
        cfg.steps = 7;
        CHECK(synthesizeProxy(trainedModel(), 1, s, cfg) == a);
        cfg.steps = 1;
        for (double v : a.data) CHECK((v >= 0.0 && v <= 1.0));
    }
}

TEST_CASE("sparse proxies share the background outside the mask") {
    SynthesisConfig cfg;
    cfg.seed = 2;
    cfg.steps = 10;
    cfg.corner = Corner::topLeft;
    const Tensor x = synthesizeProxy(trainedModel(), 2, Strategy::sparse, cfg);
    const std::size_t width = 64, n = x.dim(0);
    std::size_t differing = 0;
    for (std::size_t p = 0; p < width; ++p) {
        const bool inMask = p / 8 < 2 && p % 8 < 2;
        for (std::size_t s = 1; s < n; ++s) {
            const bool same = x.data[s * width + p] == x.data[p];
            if (!inMask) CHECK(same);
            if (inMask && !same) ++differing;
        }
    }
    CHECK(differing > 0);
}

TEST_CASE("synthesis raises the target confidence") {
    const Model& m = trainedModel();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (Strategy s : kStrategies) {
            SynthesisConfig cfg;
            cfg.seed = seed;
            cfg.steps = 30;
            const int c = static_cast<int>(seed % 4);
            SynthesisConfig still = cfg;
            still.stepSize = 0.0;
            still.noiseScale = 0.0;
            const double before = meanConfidence(m, synthesizeProxy(m, c, s, still), c);
            const double after = meanConfidence(m, synthesizeProxy(m, c, s, cfg), c);
            CHECK(after >= before);
        }
    }
}

TEST_CASE("invalid synthesis class is rejected") {
    CHECK_THROWS_AS(synthesizeProxy(trainedModel(), 9, Strategy::smooth, {}), ValidationError);
}

TEST_CASE("total variation gradient matches finite differences") {
    Rng rng(3);
    std::vector<double> img(2 * 4 * 5);
    for (double& v : img) v = rng.uniform();
    std::vector<double> grad(img.size(), 0.0);
    totalVariation(img, 2, 4, 5, grad);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double saved = img[i];
        img[i] = saved + 1e-6;
        const double up = totalVariation(img, 2, 4, 5, {});
        img[i] = saved - 1e-6;
        const double down = totalVariation(img, 2, 4, 5, {});
        img[i] = saved;
        CHECK(grad[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
    }
}

TEST_CASE("strategy score examples") {
    const Model& m = trainedModel();
    SynthesisConfig cfg;
    cfg.steps = 5;
    const Tensor batch = synthesizeProxy(m, 0, Strategy::smooth, cfg);
    CHECK(strategyScore(m, batch, 0, 1.0) == doctest::Approx(meanConfidence(m, batch, 0)));

    Tensor same({4, 1, 8, 8}, 0.3);
    CHECK(strategyScore(m, same, 0, 0.0) == doctest::Approx(1.0));
    const double p = meanConfidence(m, batch, 1), sim = meanPairwiseCosine(batch);
    CHECK(strategyScore(m, batch, 1, 0.7) == doctest::Approx(0.7 * p + 0.3 * sim));
    CHECK(0.7 * 0.9 + 0.3 * 0.5 == doctest::Approx(0.78));
    CHECK_THROWS_AS(strategyScore(m, Tensor({1, 1, 8, 8}), 0, 0.5), ValidationError);
}

TEST_CASE("signature examples") {
    const Model& m = trainedModel();
    const std::vector<LoraPlacement> last{{m.layers.size() - 1}};
    SynthesisConfig cfg;
    cfg.steps = 5;
    const Tensor proxies = synthesizeProxy(m, 1, Strategy::smooth, cfg);

    SUBCASE("zero-step fine-tuning is degenerate") {
        const auto v = classSignature(m, last, 2, proxies, 1, TrainConfig{0.0, 3, 8}, 5);
        CHECK(v.energy == 0.0);
        CHECK(v.alignment == 0.0);
        CHECK(v.degenerate);
    }
    SUBCASE("an update proportional to W") {
        const Tensor& w = m.layers.back().weights;
        Tensor dw = w;
        for (double& v : dw.data) v *= 0.1;
        const Tensor* ws[] = {&w};
        const Tensor* ds[] = {&dw};
        const auto v = signatureFromUpdates(ws, ds);
        CHECK(v.energy == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(v.alignment == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("energy equals an independent norm ratio") {
        const Tensor& w = m.layers.back().weights;
        Rng rng(1);
        Tensor dw(w.shape);
        for (double& v : dw.data) v = rng.uniform(-0.1, 0.1);
        const Tensor* ws[] = {&w};
        const Tensor* ds[] = {&dw};
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            a += dw.data[i] * dw.data[i];
            b += w.data[i] * w.data[i];
        }
        CHECK(std::abs(signatureFromUpdates(ws, ds).energy - std::sqrt(a) / std::sqrt(b)) <= 1e-9);
    }
    SUBCASE("trained signature is finite and non-degenerate") {
        const auto v = classSignature(m, last, 2, proxies, 1, TrainConfig{0.01, 3, 8, 0, OptimizerKind::adam}, 5);
        CHECK(v.energy > 0.0);
        CHECK(std::abs(v.alignment) <= 1.0);
        CHECK(!v.degenerate);
    }
}

TEST_CASE("scoring examples") {
    const ScoringConfig cfg;
    SUBCASE("identical classes tie in the conservative regime") {
        auto s = signatures({0.2, 0.2, 0.2, 0.2}, {0.1, 0.1, 0.1, 0.1});
        const auto r = scoreClasses(s, cfg);
        CHECK((r.regime == ScoreRegime::conservative));
        for (const auto& c : s) {
            CHECK(c.zEnergy == 0.0);
            CHECK(c.zAlignment == 0.0);
            CHECK(c.score == s[0].score);
        }
        CHECK(rankByScore(s) == std::vector<int>{0, 1, 2, 3});
    }
    SUBCASE("isolated alignment peak") {
        // zC = 0.6745 * (x - 0) / 0.1; class 4 gets zC well above the runner-up.
        auto s = signatures({1.0, 1.1, 0.9, 1.0, 1.05}, {0.0, 0.1, -0.1, 0.05, 0.9});
        const auto r = scoreClasses(s, cfg);
        CHECK((r.regime == ScoreRegime::alignmentPeak));
        for (const auto& c : s) {
            CHECK(c.score == doctest::Approx(0.7 * c.zAlignment + 0.3 * std::abs(c.zEnergy)));
        }
        CHECK(rankByScore(s).front() == 4);
        CHECK(0.7 * 2 + 0.3 * std::abs(-1.0) == doctest::Approx(1.7));
    }
    SUBCASE("isolated low-energy anomaly") {
        auto s = signatures({1.0, 1.1, 0.9, 1.0, 0.1}, {0.1, 0.2, 0.0, 0.2, -0.05});
        const auto r = scoreClasses(s, cfg);
        CHECK((r.regime == ScoreRegime::energyAnomaly));
        for (const auto& c : s) {
            CHECK(c.score ==
                  doctest::Approx(0.7 * std::abs(c.zEnergy) + 0.3 * std::max(c.zAlignment, 0.0)));
        }
        CHECK(s[4].zAlignment < 0.0);
        CHECK(s[4].score == doctest::Approx(0.7 * std::abs(s[4].zEnergy)));
        CHECK(rankByScore(s).front() == 4);
    }
    SUBCASE("fewer than two classes is rejected") {
        auto s = signatures({1.0}, {0.0});
        CHECK_THROWS_AS(scoreClasses(s, cfg), ValidationError);
    }
}

TEST_CASE("scoring properties over random trials") {
    Rng rng(17);
    const ScoringConfig cfg;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t k = 2 + rng.below(10);
        std::vector<double> e(k), c(k);
        for (std::size_t i = 0; i < k; ++i) {
            e[i] = rng.uniform(0.0, 2.0);
            c[i] = rng.uniform(-1.0, 1.0);
        }
        auto base = signatures(e, c);
        const auto regime = scoreClasses(base, cfg).regime;
        CHECK((regime == ScoreRegime::alignmentPeak || regime == ScoreRegime::energyAnomaly ||
               regime == ScoreRegime::conservative));

        std::vector<double> zE;
        for (const auto& s : base) zE.push_back(s.zEnergy);
        if (robustStats(e).mad > 0.0) CHECK(std::abs(median(zE)) <= 1e-9);

        // Shifting every energy leaves z-scores and scores unchanged.
        std::vector<double> shifted = e;
        const double shift = rng.uniform(-5.0, 5.0);
        for (double& v : shifted) v += shift;
        auto moved = signatures(shifted, c);
        scoreClasses(moved, cfg);
        for (std::size_t i = 0; i < k; ++i) {
            CHECK(std::abs(moved[i].zEnergy - base[i].zEnergy) <= 1e-9);
            CHECK(std::abs(moved[i].score - base[i].score) <= 1e-9);
        }

        // Permuting the class order leaves each class's score unchanged.
        std::vector<std::size_t> order(k);
        for (std::size_t i = 0; i < k; ++i) order[i] = i;
        rng.shuffle(std::span(order));
        std::vector<ClassSignature> permuted;
        for (std::size_t i : order) permuted.push_back(signatures(e, c)[i]);
        scoreClasses(permuted, cfg);
        for (const auto& p : permuted) {
            CHECK(p.score == base[static_cast<std::size_t>(p.classId)].score);
        }
        CHECK(rankByScore(permuted) == rankByScore(base));
    }
}

TEST_CASE("aggregation examples") {
    SUBCASE("consistent winner is flagged") {
        std::vector<TrialRanking> t{trialWithRanks(0, {2, 0, 1}), trialWithRanks(1, {2, 1, 0}),
                                    trialWithRanks(2, {2, 0, 1})};
        const auto v = aggregateTrials(t, 1.0);
        CHECK(v.meanRank[2] == 1.0);
        CHECK(v.rankVar[2] == 0.0);
        CHECK(v.top1 == 2);
        REQUIRE(v.flagged.has_value());
        CHECK(*v.flagged == 2);
        CHECK(v.top3Hit(v.top1));
    }
    SUBCASE("ranks 1, 2, 3 give mean 2 and variance 2/3") {
        std::vector<TrialRanking> t{trialWithRanks(0, {0, 1, 2}), trialWithRanks(1, {1, 0, 2}),
                                    trialWithRanks(2, {1, 2, 0})};
        const auto v = aggregateTrials(t, 1.0);
        CHECK(v.meanRank[0] == doctest::Approx(2.0));
        CHECK(v.rankVar[0] == doctest::Approx(2.0 / 3.0));
    }
    SUBCASE("equal mean rank falls back to lower variance") {
        // Class 0 ranks (1,1,2,2,...) and class 1 ranks (1,2,1,2) with different spreads.
        std::vector<TrialRanking> t{trialWithRanks(0, {1, 0, 2}), trialWithRanks(1, {1, 0, 2}),
                                    trialWithRanks(2, {0, 2, 1}), trialWithRanks(3, {0, 1, 2}),
                                    trialWithRanks(4, {1, 0, 2})};
        const auto v = aggregateTrials(t, 1.0);
        // class 0: ranks 2,2,1,1,2 -> mean 1.6, var 0.24; class 1: 1,1,3,2,1 -> mean 1.6, var 0.64
        CHECK(v.meanRank[0] == doctest::Approx(v.meanRank[1]));
        CHECK(v.rankVar[0] < v.rankVar[1]);
        CHECK(v.top1 == 0);
        CHECK(!v.flagged.has_value());
    }
    SUBCASE("mismatched class sets are rejected") {
        std::vector<TrialRanking> t{trialWithRanks(0, {0, 1}), trialWithRanks(1, {0, 2})};
        CHECK_THROWS_AS(aggregateTrials(t, 1.0), ValidationError);
    }
}

TEST_CASE("trials are deterministic permutations") {
    const Model& m = trainedModel();
    const std::vector<LoraPlacement> last{{m.layers.size() - 1}};
    BackdoorConfig cfg;
    cfg.synthesis.steps = 3;
    cfg.synthesis.batchSize = 4;
    cfg.signatureTraining.epochs = 2;
    cfg.rank = 2;
    const std::vector<int> classes{0, 1, 2, 3};
    const auto a = runTrial(m, last, classes, cfg, 0, 21);
    const auto b = runTrial(m, last, classes, cfg, 0, 21);
    CHECK(a.rankedClasses == b.rankedClasses);
    std::vector<int> sorted = a.rankedClasses;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == classes);
    for (std::size_t i = 0; i < a.perClass.size(); ++i) {
        CHECK(a.perClass[i].score == b.perClass[i].score);
        CHECK(a.perClass[i].energy == b.perClass[i].energy);
    }
    cfg.trials = 2;
    const auto v = auditBackdoor(m, last, cfg);
    CHECK(v.trials == 2);
    CHECK(v.top3.size() == 3);
    CHECK(v.top3.front() == v.top1);
    CHECK(nlohmann::json(v) == nlohmann::json(auditBackdoor(m, last, cfg)));
}

TEST_CASE("backdoor config JSON round trip") {
    BackdoorConfig c;
    c.synthesis.steps = 42;
    c.trials = 3;
    c.rank = 4;
    c.signatureTraining.optimizer = OptimizerKind::sgd;
    const auto back = nlohmann::json(c).get<BackdoorConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
    c.scoring.beta2 = 0.9;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}
