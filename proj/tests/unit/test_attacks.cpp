// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>

#include "lora_audit/attacks.hpp"
#include "lora_audit/errors.hpp"

using namespace lora_audit;

TEST_CASE("patch overwrites exactly the patch pixels") {
    PoisonSpec spec = makePatchSpec({1, 8, 8}, 0, 0.1, 1);
    CHECK(spec.patch.shape == Shape{1, 2, 2});
    CHECK(spec.patchRow == 6);
    CHECK(spec.patchCol == 6);
    const Tensor x = applyTrigger(Tensor({1, 8, 8}), spec);
    CHECK(std::count(x.data.begin(), x.data.end(), 1.0) == 4);
    CHECK(std::count(x.data.begin(), x.data.end(), 0.0) == 60);
    CHECK(x.data[63] == 1.0);
}

TEST_CASE("blend mixes with the blend image") {
    PoisonSpec spec = makeBlendSpec({1, 4, 4}, 0, 0.1, 1, 0.2);
    spec.blendImage = Tensor({1, 4, 4}, 1.0);
    const Tensor x = applyTrigger(Tensor({1, 4, 4}, 0.5), spec);
    for (double v : x.data) CHECK(v == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("zero displacement warp is the identity") {
    PoisonSpec spec = makeWarpSpec({1, 6, 6}, 0, 0.1, 1);
    std::fill(spec.warpGrid.data.begin(), spec.warpGrid.data.end(), 0.0);
    Tensor x({1, 6, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<double>(i % 7) / 7.0;
    const Tensor y = applyTrigger(x, spec);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.data[i] - x.data[i]) <= 1e-9);
}

TEST_CASE("nonzero warp moves pixels but stays in range") {
    const PoisonSpec spec = makeWarpSpec({1, 8, 8}, 0, 0.1, 3);
    Tensor x({1, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<double>(i % 8) / 8.0;
    const Tensor y = applyTrigger(x, spec);
    CHECK(!(y == x));
    for (double v : y.data) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("poison counts follow the rate") {
    const Dataset hundred = genSynthetic(10, 10, 4, 0.1, 1);
    const auto p = poisonDataset(hundred, makePatchSpec({1, 4, 4}, 3, 0.2, 5));
    CHECK(p.poisonedIndices.size() == 20);
    CHECK(std::is_sorted(p.poisonedIndices.begin(), p.poisonedIndices.end()));
    for (auto i : p.poisonedIndices) CHECK(p.data.labels[i] == 3);

    const Dataset thousand = genSynthetic(10, 100, 4, 0.1, 1);
    const std::vector<std::pair<double, std::size_t>> expected{
        {0.01, 10}, {0.05, 50}, {0.1, 100}, {0.2, 200}};
    for (const auto& [rate, count] : expected) {
        const auto q = poisonDataset(thousand, makePatchSpec({1, 4, 4}, 0, rate, 5));
        CHECK(q.poisonedIndices.size() == count);
    }
}

TEST_CASE("poisoning is deterministic and leaves clean samples untouched") {
    const Dataset d = genSynthetic(5, 20, 6, 0.2, 1);
    for (TriggerKind kind : {TriggerKind::patch, TriggerKind::blend, TriggerKind::warp}) {
        const PoisonSpec spec = makePoisonSpec(kind, d.sampleShape(), 2, 0.3, 8);
        const auto a = poisonDataset(d, spec);
        const auto b = poisonDataset(d, spec);
        CHECK(a.poisonedIndices == b.poisonedIndices);
        CHECK(a.data.images == b.data.images);
        for (std::size_t i = 0; i < d.count(); ++i) {
            if (std::binary_search(a.poisonedIndices.begin(), a.poisonedIndices.end(), i)) continue;
            CHECK(a.data.labels[i] == d.labels[i]);
            CHECK(std::equal(d.sample(i).begin(), d.sample(i).end(), a.data.sample(i).begin()));
        }
    }
}

TEST_CASE("untrained model has chance-level attack success") {
    const Dataset test = genSynthetic(10, 300, 8, 0.3, 4);
    double total = 0.0;
    const int models = 20;
    for (int s = 0; s < models; ++s) {
        const Model m = makeMlp(test.sampleShape(), std::vector<std::size_t>{16}, 10, 100 + s);
        total += attackSuccessRate(m, test, makePatchSpec(test.sampleShape(), s % 10, 0.1, 1));
    }
    CHECK(std::abs(total / models - 0.1) <= 0.05);
}

TEST_CASE("attack success needs inputs outside the target label") {
    Dataset only = genSynthetic(2, 5, 4, 0.1, 1);
    std::fill(only.labels.begin(), only.labels.end(), 1);
    const Model m = makeMlp(only.sampleShape(), std::vector<std::size_t>{}, 2, 1);
    CHECK_THROWS_AS(attackSuccessRate(m, only, makePatchSpec(only.sampleShape(), 1, 0.1, 1)),
                    ValidationError);
}

TEST_CASE("poison spec JSON round trip and validation") {
    for (TriggerKind kind : {TriggerKind::patch, TriggerKind::blend, TriggerKind::warp}) {
        const PoisonSpec spec = makePoisonSpec(kind, {1, 8, 8}, 4, 0.05, 9);
        CHECK(nlohmann::json(spec).get<PoisonSpec>() == spec);
    }
    PoisonSpec bad = makePatchSpec({1, 8, 8}, 0, 1.5, 1);
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}
