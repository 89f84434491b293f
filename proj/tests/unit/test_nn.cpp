// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lora_audit/data.hpp"
#include "lora_audit/errors.hpp"
#include "lora_audit/nn.hpp"
#include "lora_audit/random.hpp"
#include "support/oracles.hpp"

using namespace lora_audit;

using oracle::randomTensor;

TEST_CASE("dense identity layer passes the input through") {
    Model m;
    m.inputShape = {2};
    m.classCount = 2;
    m.layers.push_back(Layer::dense(2, 2));
    m.layers[0].weights = identity(2);
    const Tensor logits = forward(m, Tensor({1, 2}, {3.0, 5.0}));
    CHECK(logits.data == std::vector<double>{3.0, 5.0});
}

TEST_CASE("relu clips negatives") {
    Model m;
    m.inputShape = {3};
    m.classCount = 3;
    m.layers.push_back(Layer::dense(3, 3));
    m.layers[0].weights = identity(3);
    m.layers.push_back(Layer::relu());
    const Tensor out = forward(m, Tensor({1, 3}, {-1.0, 0.0, 2.0}));
    CHECK(out.data == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("seeded model is deterministic across calls") {
    Model m = makeMlp({1, 4, 4}, std::vector<std::size_t>{8}, 3, 17);
    Rng rng(3);
    const Tensor x = randomTensor({5, 1, 4, 4}, rng, 0.0, 1.0);
    CHECK(forward(m, x) == forward(m, x));
    CHECK(makeMlp({1, 4, 4}, std::vector<std::size_t>{8}, 3, 17) == m);
}

TEST_CASE("cross-entropy of uniform logits is ln K") {
    Model m;
    m.inputShape = {2};
    m.classCount = 4;
    m.layers.push_back(Layer::dense(2, 4));
    const std::vector<int> labels{0, 3};
    const auto result = lossAndGradients(m, Tensor({2, 2}, {0.3, -1.0, 2.0, 0.5}), labels);
    CHECK(result.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross-entropy vanishes as the correct margin grows") {
    Model m;
    m.inputShape = {2};
    m.classCount = 2;
    m.layers.push_back(Layer::dense(2, 2));
    m.layers[0].weights = identity(2);
    const std::vector<int> labels{0};
    double previous = 1e9;
    for (double margin : {1.0, 5.0, 20.0, 60.0}) {
        const double loss = lossAndGradients(m, Tensor({1, 2}, {margin, 0.0}), labels).loss;
        CHECK(loss < previous);
        previous = loss;
    }
    CHECK(previous < 1e-20);
}

TEST_CASE("gradient oracle: every layer kind matches finite differences") {
    const auto report = oracle::gradientOracle(120, 77);
    CHECK(report.configurations >= 100);
    CHECK(report.withLowRank > 20);
    CHECK(report.shapeMismatches == 0);
    CHECK(report.worst <= 1e-4);
    CHECK(report.skipped * 100 < report.checked);
    MESSAGE("checked " << report.checked << " entries, skipped " << report.skipped
                       << " at kinks, worst relative error " << report.worst);
}

TEST_CASE("frozen layers report zero weight gradients") {
    Model m = makeMlp({1, 3, 3}, std::vector<std::size_t>{4}, 3, 5);
    m.layers[1].frozen = true;
    Rng rng(9);
    const std::vector<int> labels{0, 2};
    const auto g = lossAndGradients(m, randomTensor({2, 1, 3, 3}, rng), labels);
    for (double v : g.grads.weights[1].data) CHECK(v == 0.0);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    const Dataset data = genSynthetic(3, 10, 4, 0.2, 1);
    Model m = makeMlp(data.sampleShape(), std::vector<std::size_t>{6}, 3, 2);
    const Model before = m;
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
        train(m, data, TrainConfig{0.0, 3, 4, 1, kind});
        CHECK(m == before);
    }
}

TEST_CASE("frozen layer survives five epochs untouched") {
    const Dataset data = genSynthetic(3, 10, 4, 0.2, 1);
    Model m = makeMlp(data.sampleShape(), std::vector<std::size_t>{6}, 3, 2);
    m.layers[1].frozen = true;
    const Tensor w = m.layers[1].weights;
    train(m, data, TrainConfig{0.1, 5, 4, 1, OptimizerKind::adam});
    CHECK(m.layers[1].weights == w);
    CHECK(!(m.layers[3].weights == makeMlp(data.sampleShape(), std::vector<std::size_t>{6}, 3, 2)
                                       .layers[3]
                                       .weights));
}

TEST_CASE("separable two-class blobs are learned") {
    const Dataset data = genSynthetic(2, 50, 4, 0.1, 4);
    Model m = makeMlp(data.sampleShape(), std::vector<std::size_t>{8}, 2, 3);
    train(m, data, TrainConfig{0.1, 20, 8, 2, OptimizerKind::sgd});
    CHECK(accuracy(m, data) >= 0.95);
}

TEST_CASE("checkpoint round trip preserves the model") {
    Model m = makeCnn({1, 6, 6}, 2, 3, 3, 4, 11, 5);
    m.layers[0].frozen = true;
    const auto path = std::filesystem::temp_directory_path() / "lora_audit_ckpt_test.bin";
    saveCheckpoint(m, path);
    CHECK(loadCheckpoint(path) == m);
    std::filesystem::remove(path);
}

TEST_CASE("malformed shapes are rejected") {
    Model m = makeMlp({1, 3, 3}, std::vector<std::size_t>{4}, 3, 5);
    const std::vector<int> labels{0};
    CHECK_THROWS_AS(forward(m, Tensor({1, 1, 2, 2})), DimensionError);
    CHECK_THROWS_AS(lossAndGradients(m, Tensor({1, 1, 3, 3}), std::vector<int>{7}),
                    ValidationError);
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}
