// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lora_audit/data.hpp"
#include "lora_audit/tensor.hpp"

namespace lora_audit {

enum class LayerKind { dense, conv2d, relu, flatten };

std::string toString(LayerKind kind);
LayerKind layerKindFromString(const std::string& name);

/// Valid-padding, stride-1 convolution geometry.
struct ConvGeometry {
    std::size_t inChannels = 0;
    std::size_t outChannels = 0;
    std::size_t kernel = 0;
    std::size_t inHeight = 0;
    std::size_t inWidth = 0;

    std::size_t outHeight() const { return inHeight - kernel + 1; }
    std::size_t outWidth() const { return inWidth - kernel + 1; }
    bool operator==(const ConvGeometry&) const = default;
};

struct Layer {
    LayerKind kind = LayerKind::relu;
    Tensor weights;  // dense: (out, in); conv2d: (outC, inC, k, k)
    Tensor bias;     // dense: (out); conv2d: (outC)
    bool frozen = false;
    ConvGeometry conv;

    static Layer dense(std::size_t in, std::size_t out);
    static Layer conv2d(const ConvGeometry& geometry);
    static Layer relu();
    static Layer flatten();

    bool hasParameters() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
    std::size_t inFeatures() const { return weights.dim(1); }   // dense only
    std::size_t outFeatures() const { return weights.dim(0); }  // dense only

    bool operator==(const Layer&) const = default;
};

struct Model {
    std::vector<Layer> layers;
    std::size_t classCount = 0;
    Shape inputShape;  // per-sample
    std::uint64_t seed = 0;

    /// Per-sample input shape of layer `index` (index == layers.size() gives the output).
    Shape layerInputShape(std::size_t index) const;
    /// Throws DimensionError if layer shapes do not chain to (classCount).
    void validate() const;
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    void initialize(std::uint64_t initSeed);
    void setFrozen(bool frozen);

    bool operator==(const Model&) const = default;
};

/// flatten -> [dense -> relu]* -> dense
Model makeMlp(const Shape& inputShape, std::span<const std::size_t> hidden,
              std::size_t classCount, std::uint64_t seed);

/// conv -> relu -> conv -> relu -> flatten -> [dense -> relu] -> dense. The hidden dense
/// block is present when `hidden` > 0.
Model makeCnn(const Shape& inputShape, std::size_t conv1Channels, std::size_t conv2Channels,
              std::size_t kernel, std::size_t classCount, std::uint64_t seed,
              std::size_t hidden = 0);

/// Additive low-rank term `scale * up * down` applied on top of a dense layer's weights.
/// Non-owning; the referenced tensors must outlive the call that receives it.
struct LowRankTerm {
    std::size_t layerIndex = 0;
    const Tensor* down = nullptr;  // (r, in)
    const Tensor* up = nullptr;    // (out, r)
    double scale = 1.0;
};

struct PassOptions {
    /// Start the pass at this layer; the batch must then be that layer's input.
    std::size_t firstLayer = 0;
    bool parameterGradients = true;
    bool inputGradient = false;
};

struct Gradients {
    std::vector<Tensor> weights;  // per layer; zero-filled for frozen, empty without params
    std::vector<Tensor> bias;
    std::vector<Tensor> down;  // per low-rank term
    std::vector<Tensor> up;
    Tensor input;  // d loss / d batch when requested
};

struct LossAndGradients {
    double loss = 0.0;
    Gradients grads;
};

/// Logits of shape (batch, classCount).
Tensor forward(const Model& model, const Tensor& batch, std::span<const LowRankTerm> terms = {},
               std::size_t firstLayer = 0);

/// Activations entering layer `stopLayer` (runs layers [0, stopLayer)).
Tensor forwardTo(const Model& model, const Tensor& batch, std::size_t stopLayer);

/// Row-wise softmax of (batch, classes) logits.
Tensor softmax(const Tensor& logits);

/// Mean softmax cross-entropy and its exact gradients.
LossAndGradients lossAndGradients(const Model& model, const Tensor& batch,
                                  std::span<const int> labels,
                                  std::span<const LowRankTerm> terms = {},
                                  const PassOptions& options = {});

std::vector<int> predict(const Model& model, const Tensor& batch);
double accuracy(const Model& model, const Dataset& data);

enum class OptimizerKind { sgd, adam };

std::string toString(OptimizerKind kind);
OptimizerKind optimizerKindFromString(const std::string& name);

struct TrainConfig {
    double learningRate = 0.01;
    std::size_t epochs = 1;
    std::size_t batchSize = 32;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::sgd;

    void validate() const;
};

/// SGD or Adam (0.9, 0.999, 1e-8) over a fixed list of parameter slots.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double learningRate);

    /// params[i] -= update(grads[i]). Slot identity is positional and must not change.
    void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads);

private:
    OptimizerKind kind_;
    double learningRate_;
    std::size_t steps_ = 0;
    std::vector<Tensor> firstMoment_;
    std::vector<Tensor> secondMoment_;
};

/// Mini-batch trainer. Shuffling is seeded per epoch from config.seed.
class Trainer {
public:
    Trainer(Model& model, TrainConfig config);

    /// One pass over `data`; returns the mean mini-batch loss.
    double trainEpoch(const Dataset& data);
    std::size_t epochsCompleted() const { return epoch_; }

private:
    Model& model_;
    TrainConfig config_;
    Optimizer optimizer_;
    std::size_t epoch_ = 0;
};

/// Runs config.epochs epochs; returns per-epoch losses.
std::vector<double> train(Model& model, const Dataset& data, const TrainConfig& config);

/// Binary checkpoint: magic, version, seed, class count, input shape, then each layer's
/// kind, frozen flag, geometry and raw little-endian float64 parameters.
void saveCheckpoint(const Model& model, const std::filesystem::path& path);
Model loadCheckpoint(const std::filesystem::path& path);

}  // namespace lora_audit
