// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/lora.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "lora_audit/errors.hpp"
#include "lora_audit/geometry.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

LoraAdapter makeAdapter(const Layer& layer, LoraPlacement placement, std::size_t rank,
                        std::uint64_t seed) {
    if (layer.kind != LayerKind::dense) {
        throw PlacementError("LoRA adapters attach to dense layers only, layer " +
                             std::to_string(placement.layerIndex) + " is " +
                             toString(layer.kind));
    }
    const std::size_t out = layer.outFeatures(), in = layer.inFeatures();
    if (rank == 0 || rank > std::min(out, in)) {
        throw ValidationError("rank " + std::to_string(rank) + " must lie in [1, " +
                              std::to_string(std::min(out, in)) + "]");
    }
    LoraAdapter adapter;
    adapter.placement = placement;
    adapter.rank = rank;
    adapter.scale = 1.0 / static_cast<double>(rank);
    adapter.down = Tensor({rank, in});
    adapter.up = Tensor({out, rank});
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : adapter.down.data) v = rng.uniform(-bound, bound);
    return adapter;
}

LoraAdapter attach(Model& model, LoraPlacement placement, std::size_t rank, std::uint64_t seed) {
    if (placement.layerIndex >= model.layers.size()) {
        throw PlacementError("placement layer " + std::to_string(placement.layerIndex) +
                             " out of range");
    }
    LoraAdapter adapter = makeAdapter(model.layers[placement.layerIndex], placement, rank, seed);
    model.layers[placement.layerIndex].frozen = true;
    return adapter;
}

Tensor adaptedForward(const Layer& layer, const LoraAdapter& adapter, const Tensor& x) {
    if (layer.kind != LayerKind::dense) throw PlacementError("adapted layer must be dense");
    const bool vector = x.rank() == 1;
    const Tensor batch = vector ? x.reshaped({1, x.size()}) : x;
    if (batch.rank() != 2 || batch.dim(1) != layer.inFeatures()) {
        throw DimensionError("adapted forward input " + shapeString(x.shape) +
                             " does not match layer input " +
                             std::to_string(layer.inFeatures()));
    }
    if (adapter.down.dim(1) != layer.inFeatures() || adapter.up.dim(0) != layer.outFeatures()) {
        throw DimensionError("adapter shapes do not match the layer");
    }
    Tensor y = matmulTransB(batch, layer.weights);
    const Tensor update = matmulTransB(matmulTransB(batch, adapter.down), adapter.up);
    const std::size_t out = layer.outFeatures();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y.data[i] += layer.bias.data[i % out] + adapter.scale * update.data[i];
    }
    return vector ? y.reshaped({out}) : y;
}

std::vector<UpdateTrajectory> fineTuneRecord(const Model& model, std::span<LoraAdapter> adapters,
                                             const Tensor& batch, std::span<const int> labels,
                                             const TrainConfig& config, NormKind norm) {
    config.validate();
    if (adapters.empty()) throw ValidationError("no adapters to fine-tune");
    if (batch.rank() == 0 || batch.dim(0) == 0) {
        throw ValidationError("cannot fine-tune on an empty batch");
    }
    if (labels.size() != batch.dim(0)) throw ValidationError("label count does not match batch");

    std::size_t firstLayer = model.layers.size();
    std::vector<LowRankTerm> terms;
    std::vector<UpdateTrajectory> trajectories(adapters.size());
    for (std::size_t a = 0; a < adapters.size(); ++a) {
        const auto& adapter = adapters[a];
        if (adapter.placement.layerIndex >= model.layers.size()) {
            throw PlacementError("adapter placement out of range");
        }
        firstLayer = std::min(firstLayer, adapter.placement.layerIndex);
        terms.push_back(adapter.term());
        const double base = matrixNorm(model.layers[adapter.placement.layerIndex].weights, norm);
        if (!(base > 0.0)) throw DegenerateInputError("adapted layer has zero norm");
        trajectories[a].baseNorm = base;
        trajectories[a].normKind = norm;
    }

    // Layers below the lowest adapter are frozen, so their output is computed once.
    const Tensor features = forwardTo(model, batch, firstLayer);
    const std::size_t n = features.dim(0);

    Optimizer optimizer(config.optimizer, config.learningRate);
    PassOptions pass;
    pass.firstLayer = firstLayer;
    pass.parameterGradients = false;

    std::vector<std::size_t> order(n);
    std::vector<int> miniLabels;
    std::vector<Tensor*> params;
    for (auto& adapter : adapters) {
        params.push_back(&adapter.down);
        params.push_back(&adapter.up);
    }
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(Rng::derive(config.seed, epoch));
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t first = 0; first < n; first += config.batchSize) {
            const std::size_t count = std::min(config.batchSize, n - first);
            const std::span<const std::size_t> idx(order.data() + first, count);
            miniLabels.resize(count);
            for (std::size_t i = 0; i < count; ++i) miniLabels[i] = labels[idx[i]];
            const auto result =
                lossAndGradients(model, gatherRows(features, idx), miniLabels, terms, pass);
            std::vector<const Tensor*> grads;
            for (std::size_t a = 0; a < adapters.size(); ++a) {
                grads.push_back(&result.grads.down[a]);
                grads.push_back(&result.grads.up[a]);
            }
            optimizer.step(params, grads);
        }
        for (std::size_t a = 0; a < adapters.size(); ++a) {
            Tensor delta = adapters[a].delta();
            trajectories[a].norms.push_back(matrixNorm(delta, norm));
            trajectories[a].snapshots.push_back(std::move(delta));
        }
    }
    return trajectories;
}

UpdateTrajectory fineTuneRecord(const Model& model, LoraAdapter& adapter, const Tensor& batch,
                                std::span<const int> labels, const TrainConfig& config,
                                NormKind norm) {
    return fineTuneRecord(model, std::span<LoraAdapter>(&adapter, 1), batch, labels, config,
                          norm)
        .front();
}

void saveTrajectory(const UpdateTrajectory& trajectory, const std::filesystem::path& path,
                    bool includeSnapshots) {
    nlohmann::json j;
    j["schemaVersion"] = 1;
    j["epochCount"] = trajectory.epochCount();
    j["baseNorm"] = trajectory.baseNorm;
    j["normKind"] = trajectory.normKind == NormKind::spectral ? "spectral" : "frobenius";
    j["norms"] = trajectory.norms;
    if (includeSnapshots) {
        auto& snaps = j["snapshots"] = nlohmann::json::array();
        for (const auto& s : trajectory.snapshots) {
            snaps.push_back({{"shape", s.shape}, {"data", s.data}});
        }
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write trajectory " + path.string());
    out << j.dump(1) << '\n';
}

UpdateTrajectory loadTrajectory(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trajectory " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    UpdateTrajectory t;
    try {
        t.baseNorm = j.at("baseNorm").get<double>();
        t.norms = j.at("norms").get<std::vector<double>>();
        t.normKind = j.value("normKind", "frobenius") == "spectral" ? NormKind::spectral
                                                                    : NormKind::frobenius;
        if (j.contains("snapshots")) {
            for (const auto& s : j["snapshots"]) {
                t.snapshots.emplace_back(s.at("shape").get<Shape>(),
                                         s.at("data").get<std::vector<double>>());
            }
        }
        if (j.at("epochCount").get<std::size_t>() != t.norms.size()) {
            throw FormatError("epochCount does not match the norm list");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return t;
}

}  // namespace lora_audit
