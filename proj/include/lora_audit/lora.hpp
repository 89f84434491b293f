// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lora_audit/nn.hpp"
#include "lora_audit/tensor.hpp"

namespace lora_audit {

enum class NormKind { frobenius, spectral };

struct LoraPlacement {
    std::size_t layerIndex = 0;
    bool operator==(const LoraPlacement&) const = default;
};

/// Trainable pair (down = A, up = B) with ΔW = up * down and adapted weights
/// W + scale * ΔW.
struct LoraAdapter {
    LoraPlacement placement;
    Tensor down;  // A: (r, in)
    Tensor up;    // B: (out, r)
    std::size_t rank = 0;
    double scale = 1.0;

    /// ΔW = B A, shape (out, in).
    Tensor delta() const { return matmul(up, down); }
    LowRankTerm term() const { return {placement.layerIndex, &down, &up, scale}; }
};

/// Freezes the target layer and returns a fresh adapter: A seeded uniform in
/// ±1/sqrt(in), B zero, scale 1/r.
LoraAdapter attach(Model& model, LoraPlacement placement, std::size_t rank, std::uint64_t seed);

/// Fresh adapter for a dense layer without touching any model state.
LoraAdapter makeAdapter(const Layer& layer, LoraPlacement placement, std::size_t rank,
                        std::uint64_t seed);

/// W x + b + scale * B A x for x of shape (in) or (batch, in).
Tensor adaptedForward(const Layer& layer, const LoraAdapter& adapter, const Tensor& x);

/// Per-epoch record of one adapter's update ΔW^(t) = B^(t) A^(t).
struct UpdateTrajectory {
    std::vector<Tensor> snapshots;
    std::vector<double> norms;
    double baseNorm = 0.0;
    NormKind normKind = NormKind::frobenius;

    std::size_t epochCount() const { return norms.size(); }
    const Tensor& finalDelta() const { return snapshots.back(); }
};

/// Trains only the adapters' A and B on the batch for config.epochs epochs, recording
/// each adapter's ΔW and its norm after every epoch. The model is read-only.
std::vector<UpdateTrajectory> fineTuneRecord(const Model& model, std::span<LoraAdapter> adapters,
                                             const Tensor& batch, std::span<const int> labels,
                                             const TrainConfig& config,
                                             NormKind norm = NormKind::frobenius);

UpdateTrajectory fineTuneRecord(const Model& model, LoraAdapter& adapter, const Tensor& batch,
                                std::span<const int> labels, const TrainConfig& config,
                                NormKind norm = NormKind::frobenius);

/// JSON dump: epochCount, baseNorm, normKind, norms and (optionally) flattened snapshots.
void saveTrajectory(const UpdateTrajectory& trajectory, const std::filesystem::path& path,
                    bool includeSnapshots = true);
UpdateTrajectory loadTrajectory(const std::filesystem::path& path);

}  // namespace lora_audit
