// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lora_audit/tensor.hpp"

namespace lora_audit {

/// Labeled images, shape (count, channels, height, width), pixels in [0, 1].
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::string name;
    std::size_t classCount = 0;

    std::size_t count() const noexcept { return labels.size(); }
    /// Per-sample shape (channels, height, width).
    Shape sampleShape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }
    std::size_t sampleSize() const { return shapeProduct(sampleShape()); }

    std::span<const double> sample(std::size_t i) const {
        return {images.data.data() + i * sampleSize(), sampleSize()};
    }
    std::span<double> sample(std::size_t i) {
        return {images.data.data() + i * sampleSize(), sampleSize()};
    }

    Dataset subset(std::span<const std::size_t> indices, std::string subsetName = {}) const;

    /// Throws ValidationError when counts disagree or labels leave [0, classCount).
    void validate() const;
};

/// Reads an IDX image file (magic 2051) and its label file (magic 2049).
Dataset loadIdx(const std::filesystem::path& imagesPath, const std::filesystem::path& labelsPath,
                std::size_t classCount = 10);

/// Writes pixels as round(255 * v) bytes. Only single-channel datasets are representable.
void writeIdx(const Dataset& dataset, const std::filesystem::path& imagesPath,
              const std::filesystem::path& labelsPath);

/// Class-patterned images: each class gets a seeded base pattern, each sample adds
/// Gaussian noise of the given scale, then pixels are clamped to [0, 1].
Dataset genSynthetic(std::size_t classCount, std::size_t perClass, std::size_t imageSize,
                     double noise, std::uint64_t seed, std::size_t channels = 1);

/// Average-pools each image by an integer factor (edges must divide evenly).
Dataset downsample(const Dataset& dataset, std::size_t factor);

inline constexpr std::size_t kFractionCount = 10;

/// One tenth of a training set held out for the paired member/non-member protocol.
struct FractionSplit {
    std::size_t fractionIndex = 0;
    std::vector<std::size_t> heldFraction;
    std::vector<std::size_t> remainder;
};

/// Training sets for the two models of a paired membership run.
struct PairedTrainSets {
    FractionSplit split;
    Dataset withFraction;     // full training set: the held fraction is a member
    Dataset withoutFraction;  // remainder only: the held fraction is a non-member
    Dataset held;
};

/// Seeded partition of [0, count) into kFractionCount fractions of floor(count / 10)
/// samples; leftover indices belong to no fraction and always stay in the remainder.
std::vector<std::vector<std::size_t>> partitionFractions(std::size_t count, std::uint64_t seed);

FractionSplit splitFractions(std::size_t count, std::size_t fractionIndex, std::uint64_t seed);
PairedTrainSets pairedTrainSets(const Dataset& dataset, std::size_t fractionIndex,
                                std::uint64_t seed);

/// Structured description of where a dataset came from, for experiment manifests.
struct DatasetManifest {
    std::string name;
    std::vector<std::string> sourceFiles;
    std::uint64_t seed = 0;
    std::size_t count = 0;
    std::vector<std::size_t> splitIndices;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

}  // namespace lora_audit
