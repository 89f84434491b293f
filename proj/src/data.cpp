// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include "lora_audit/errors.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string subsetName) const {
    Dataset out;
    out.images = gatherRows(images, indices);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(i));
    out.name = subsetName.empty() ? name : std::move(subsetName);
    out.classCount = classCount;
    return out;
}

void Dataset::validate() const {
    if (images.rank() != 4) {
        throw ValidationError("dataset images must be (count, channels, height, width), got " +
                              shapeString(images.shape));
    }
    if (images.dim(0) != labels.size()) {
        throw ValidationError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                              std::to_string(labels.size()) + " labels");
    }
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= classCount) {
            throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(classCount) + ")");
        }
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;  // 2051
constexpr std::uint32_t kLabelMagic = 0x00000801;  // 2049

std::vector<unsigned char> readAll(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t bigEndian32(const std::vector<unsigned char>& bytes, std::size_t offset,
                          const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) throw IoError(path.string() + ": truncated IDX header");
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void putBigEndian32(std::ostream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                           static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(bytes, 4);
}

}  // namespace

Dataset loadIdx(const std::filesystem::path& imagesPath, const std::filesystem::path& labelsPath,
                std::size_t classCount) {
    const auto imageBytes = readAll(imagesPath);
    const auto labelBytes = readAll(labelsPath);

    if (bigEndian32(imageBytes, 0, imagesPath) != kImageMagic) {
        throw FormatError(imagesPath.string() + ": not an IDX image file (magic 2051)");
    }
    if (bigEndian32(labelBytes, 0, labelsPath) != kLabelMagic) {
        throw FormatError(labelsPath.string() + ": not an IDX label file (magic 2049)");
    }
    const std::size_t count = bigEndian32(imageBytes, 4, imagesPath);
    const std::size_t rows = bigEndian32(imageBytes, 8, imagesPath);
    const std::size_t cols = bigEndian32(imageBytes, 12, imagesPath);
    const std::size_t labelCount = bigEndian32(labelBytes, 4, labelsPath);
    if (rows == 0 || cols == 0) throw FormatError(imagesPath.string() + ": zero image size");
    if (count != labelCount) {
        throw ValidationError("IDX files disagree: " + std::to_string(count) + " images vs " +
                              std::to_string(labelCount) + " labels");
    }
    if (imageBytes.size() < 16 + count * rows * cols) {
        throw IoError(imagesPath.string() + ": truncated pixel data");
    }
    if (labelBytes.size() < 8 + count) throw IoError(labelsPath.string() + ": truncated labels");

    Dataset out;
    out.name = imagesPath.filename().string();
    out.classCount = classCount;
    out.images = Tensor({count, 1, rows, cols});
    for (std::size_t i = 0; i < count * rows * cols; ++i) {
        out.images.data[i] = static_cast<double>(imageBytes[16 + i]) / 255.0;
    }
    out.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) out.labels[i] = labelBytes[8 + i];
    out.validate();
    return out;
}

void writeIdx(const Dataset& dataset, const std::filesystem::path& imagesPath,
              const std::filesystem::path& labelsPath) {
    dataset.validate();
    if (dataset.images.dim(1) != 1) throw ValidationError("IDX output needs 1-channel images");
    std::ofstream images(imagesPath, std::ios::binary);
    std::ofstream labels(labelsPath, std::ios::binary);
    if (!images || !labels) throw IoError("cannot write IDX output");
    putBigEndian32(images, kImageMagic);
    putBigEndian32(images, static_cast<std::uint32_t>(dataset.count()));
    putBigEndian32(images, static_cast<std::uint32_t>(dataset.images.dim(2)));
    putBigEndian32(images, static_cast<std::uint32_t>(dataset.images.dim(3)));
    for (double v : dataset.images.data) {
        images.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
    putBigEndian32(labels, kLabelMagic);
    putBigEndian32(labels, static_cast<std::uint32_t>(dataset.count()));
    for (int label : dataset.labels) labels.put(static_cast<char>(label));
    if (!images || !labels) throw IoError("failed writing IDX output");
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

Dataset genSynthetic(std::size_t classCount, std::size_t perClass, std::size_t imageSize,
                     double noise, std::uint64_t seed, std::size_t channels) {
    if (classCount < 2) throw ValidationError("synthetic data needs at least two classes");
    if (imageSize == 0 || channels == 0) throw ValidationError("image size must be positive");
    if (noise < 0.0) throw ValidationError("noise must be non-negative");
    const std::size_t pixels = channels * imageSize * imageSize;

    // Base patterns: a coarse 4x4 random grid upsampled to the image, so classes are
    // smooth blobs rather than per-pixel noise.
    Rng patternRng(Rng::derive(seed, 0));
    std::vector<std::vector<double>> bases(classCount, std::vector<double>(pixels));
    constexpr std::size_t kGrid = 4;
    for (auto& base : bases) {
        std::vector<double> grid(channels * kGrid * kGrid);
        for (double& g : grid) g = patternRng.uniform();
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t i = 0; i < imageSize; ++i) {
                for (std::size_t j = 0; j < imageSize; ++j) {
                    const std::size_t gi = i * kGrid / imageSize, gj = j * kGrid / imageSize;
                    base[(c * imageSize + i) * imageSize + j] = grid[(c * kGrid + gi) * kGrid + gj];
                }
            }
        }
    }

    Dataset out;
    out.name = "synthetic";
    out.classCount = classCount;
    out.images = Tensor({classCount * perClass, channels, imageSize, imageSize});
    out.labels.resize(classCount * perClass);
    Rng noiseRng(Rng::derive(seed, 1));
    // Samples are interleaved by class so any prefix is roughly balanced.
    for (std::size_t s = 0; s < perClass; ++s) {
        for (std::size_t c = 0; c < classCount; ++c) {
            const std::size_t index = s * classCount + c;
            out.labels[index] = static_cast<int>(c);
            double* px = &out.images.data[index * pixels];
            for (std::size_t p = 0; p < pixels; ++p) {
                const double v = bases[c][p] + (noise > 0.0 ? noise * noiseRng.normal() : 0.0);
                px[p] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

Dataset downsample(const Dataset& dataset, std::size_t factor) {
    if (factor == 0) throw ValidationError("downsample factor must be positive");
    dataset.validate();
    const std::size_t n = dataset.images.dim(0), ch = dataset.images.dim(1);
    const std::size_t h = dataset.images.dim(2), w = dataset.images.dim(3);
    if (h % factor || w % factor) throw DimensionError("image edges must divide the factor");
    const std::size_t oh = h / factor, ow = w / factor;
    Dataset out;
    out.name = dataset.name;
    out.classCount = dataset.classCount;
    out.labels = dataset.labels;
    out.images = Tensor({n, ch, oh, ow});
    const double norm = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t b = 0; b < n * ch; ++b) {
        const double* src = &dataset.images.data[b * h * w];
        double* dst = &out.images.data[b * oh * ow];
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                double s = 0.0;
                for (std::size_t di = 0; di < factor; ++di) {
                    for (std::size_t dj = 0; dj < factor; ++dj) {
                        s += src[(i * factor + di) * w + j * factor + dj];
                    }
                }
                dst[i * ow + j] = s * norm;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fraction splits
// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> partitionFractions(std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(Rng::derive(seed, 0x5117));
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t size = count / kFractionCount;
    std::vector<std::vector<std::size_t>> fractions(kFractionCount);
    for (std::size_t f = 0; f < kFractionCount; ++f) {
        fractions[f].assign(order.begin() + static_cast<std::ptrdiff_t>(f * size),
                            order.begin() + static_cast<std::ptrdiff_t>((f + 1) * size));
        std::sort(fractions[f].begin(), fractions[f].end());
    }
    return fractions;
}

FractionSplit splitFractions(std::size_t count, std::size_t fractionIndex, std::uint64_t seed) {
    if (fractionIndex >= kFractionCount) {
        throw ValidationError("fraction index " + std::to_string(fractionIndex) +
                              " outside [0, 10)");
    }
    auto fractions = partitionFractions(count, seed);
    FractionSplit split;
    split.fractionIndex = fractionIndex;
    split.heldFraction = std::move(fractions[fractionIndex]);
    std::vector<bool> held(count, false);
    for (auto i : split.heldFraction) held[i] = true;
    for (std::size_t i = 0; i < count; ++i) {
        if (!held[i]) split.remainder.push_back(i);
    }
    return split;
}

PairedTrainSets pairedTrainSets(const Dataset& dataset, std::size_t fractionIndex,
                                std::uint64_t seed) {
    PairedTrainSets sets;
    sets.split = splitFractions(dataset.count(), fractionIndex, seed);
    sets.withFraction = dataset;
    sets.withoutFraction = dataset.subset(sets.split.remainder, dataset.name + "/without");
    sets.held = dataset.subset(sets.split.heldFraction, dataset.name + "/held");
    return sets;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
    j = nlohmann::json{{"name", m.name},
                       {"sourceFiles", m.sourceFiles},
                       {"seed", m.seed},
                       {"count", m.count},
                       {"splitIndices", m.splitIndices}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
    j.at("name").get_to(m.name);
    j.at("sourceFiles").get_to(m.sourceFiles);
    j.at("seed").get_to(m.seed);
    j.at("count").get_to(m.count);
    j.at("splitIndices").get_to(m.splitIndices);
}

}  // namespace lora_audit
