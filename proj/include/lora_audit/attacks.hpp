// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lora_audit/data.hpp"
#include "lora_audit/nn.hpp"
#include "lora_audit/tensor.hpp"

namespace lora_audit {

enum class TriggerKind { patch, blend, warp };

std::string toString(TriggerKind kind);
TriggerKind triggerKindFromString(const std::string& name);

/// Dirty-label backdoor description. Exactly one payload is populated, matching `kind`.
struct PoisonSpec {
    TriggerKind kind = TriggerKind::patch;
    int targetLabel = 0;
    double rate = 0.1;
    std::uint64_t seed = 0;

    // patch: (channels, p, p) image pasted with its top-left corner at (row, col)
    Tensor patch;
    std::size_t patchRow = 0;
    std::size_t patchCol = 0;

    // blend: x' = (1 - a) x + a * blendImage
    Tensor blendImage;
    double blendAlpha = 0.0;

    // warp: (2, g, g) displacement grid in [-1, 1] (dy, dx), upsampled bilinearly and
    // scaled by `warpStrength` pixels
    Tensor warpGrid;
    double warpStrength = 0.0;

    void validate() const;
    bool operator==(const PoisonSpec&) const = default;
};

/// White square in the bottom-right corner, edge = image edge / 4.
PoisonSpec makePatchSpec(const Shape& sampleShape, int targetLabel, double rate,
                         std::uint64_t seed);
/// Seeded uniform-noise blend image.
PoisonSpec makeBlendSpec(const Shape& sampleShape, int targetLabel, double rate,
                         std::uint64_t seed, double alpha = 0.2);
/// Seeded 4x4 displacement grid.
PoisonSpec makeWarpSpec(const Shape& sampleShape, int targetLabel, double rate,
                        std::uint64_t seed, double strength = 1.5);
PoisonSpec makePoisonSpec(TriggerKind kind, const Shape& sampleShape, int targetLabel,
                          double rate, std::uint64_t seed);

/// x̂ = φ(x, t) for one (channels, height, width) sample, clamped to [0, 1].
Tensor applyTrigger(const Tensor& x, const PoisonSpec& spec);

struct PoisonedDataset {
    Dataset data;
    std::vector<std::size_t> poisonedIndices;  // ascending
};

/// Triggers and relabels round(rate * N) samples chosen by seeded sampling without
/// replacement; all other samples are copied untouched.
PoisonedDataset poisonDataset(const Dataset& dataset, const PoisonSpec& spec);

/// Fraction of triggered test inputs (excluding those already labelled with the target)
/// that the model assigns to the target label.
double attackSuccessRate(const Model& model, const Dataset& cleanTest, const PoisonSpec& spec);

void to_json(nlohmann::json& j, const PoisonSpec& spec);
void from_json(const nlohmann::json& j, PoisonSpec& spec);

}  // namespace lora_audit
