// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "lora_audit/errors.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

std::string toString(TriggerKind kind) {
    switch (kind) {
    case TriggerKind::patch: return "patch";
    case TriggerKind::blend: return "blend";
    case TriggerKind::warp: return "warp";
    }
    return "unknown";
}

TriggerKind triggerKindFromString(const std::string& name) {
    if (name == "patch" || name == "badnets") return TriggerKind::patch;
    if (name == "blend" || name == "blended") return TriggerKind::blend;
    if (name == "warp" || name == "wanet") return TriggerKind::warp;
    throw ValidationError("unknown trigger kind '" + name + "'");
}

void PoisonSpec::validate() const {
    if (!(rate > 0.0 && rate <= 1.0)) throw ValidationError("poison rate must lie in (0, 1]");
    if (targetLabel < 0) throw ValidationError("target label must be non-negative");
    const bool hasPatch = !patch.empty(), hasBlend = !blendImage.empty(),
               hasWarp = !warpGrid.empty();
    if (hasPatch + hasBlend + hasWarp != 1) {
        throw ValidationError("poison spec must carry exactly one trigger payload");
    }
    switch (kind) {
    case TriggerKind::patch:
        if (!hasPatch || patch.rank() != 3) throw ValidationError("patch trigger needs a patch");
        break;
    case TriggerKind::blend:
        if (!hasBlend || blendImage.rank() != 3) {
            throw ValidationError("blend trigger needs a blend image");
        }
        if (!(blendAlpha > 0.0 && blendAlpha < 1.0)) {
            throw ValidationError("blend alpha must lie in (0, 1)");
        }
        break;
    case TriggerKind::warp:
        if (!hasWarp || warpGrid.rank() != 3 || warpGrid.dim(0) != 2 || warpGrid.dim(1) < 2 ||
            warpGrid.dim(2) < 2) {
            throw ValidationError("warp trigger needs a (2, g, g) grid with g >= 2");
        }
        break;
    }
}

PoisonSpec makePatchSpec(const Shape& sampleShape, int targetLabel, double rate,
                         std::uint64_t seed) {
    if (sampleShape.size() != 3) throw DimensionError("sample shape must be (c, h, w)");
    PoisonSpec spec;
    spec.kind = TriggerKind::patch;
    spec.targetLabel = targetLabel;
    spec.rate = rate;
    spec.seed = seed;
    const std::size_t edge = std::max<std::size_t>(1, std::min(sampleShape[1], sampleShape[2]) / 4);
    spec.patch = Tensor({sampleShape[0], edge, edge}, 1.0);
    spec.patchRow = sampleShape[1] - edge;
    spec.patchCol = sampleShape[2] - edge;
    return spec;
}

PoisonSpec makeBlendSpec(const Shape& sampleShape, int targetLabel, double rate,
                         std::uint64_t seed, double alpha) {
    if (sampleShape.size() != 3) throw DimensionError("sample shape must be (c, h, w)");
    PoisonSpec spec;
    spec.kind = TriggerKind::blend;
    spec.targetLabel = targetLabel;
    spec.rate = rate;
    spec.seed = seed;
    spec.blendAlpha = alpha;
    spec.blendImage = Tensor(sampleShape);
    Rng rng(Rng::derive(seed, 0xb1e));
    for (double& v : spec.blendImage.data) v = rng.uniform();
    return spec;
}

PoisonSpec makeWarpSpec(const Shape& sampleShape, int targetLabel, double rate,
                        std::uint64_t seed, double strength) {
    if (sampleShape.size() != 3) throw DimensionError("sample shape must be (c, h, w)");
    PoisonSpec spec;
    spec.kind = TriggerKind::warp;
    spec.targetLabel = targetLabel;
    spec.rate = rate;
    spec.seed = seed;
    spec.warpStrength = strength;
    spec.warpGrid = Tensor({2, 4, 4});
    Rng rng(Rng::derive(seed, 0x3a9));
    for (double& v : spec.warpGrid.data) v = rng.uniform(-1.0, 1.0);
    return spec;
}

PoisonSpec makePoisonSpec(TriggerKind kind, const Shape& sampleShape, int targetLabel,
                          double rate, std::uint64_t seed) {
    switch (kind) {
    case TriggerKind::patch: return makePatchSpec(sampleShape, targetLabel, rate, seed);
    case TriggerKind::blend: return makeBlendSpec(sampleShape, targetLabel, rate, seed);
    case TriggerKind::warp: return makeWarpSpec(sampleShape, targetLabel, rate, seed);
    }
    throw ValidationError("unknown trigger kind");
}

namespace {

// Bilinear sample of a (g, g) grid at fractional grid coordinates.
double bilinear(const double* grid, std::size_t rows, std::size_t cols, double r, double c) {
    r = std::clamp(r, 0.0, static_cast<double>(rows - 1));
    c = std::clamp(c, 0.0, static_cast<double>(cols - 1));
    const auto r0 = static_cast<std::size_t>(std::floor(r));
    const auto c0 = static_cast<std::size_t>(std::floor(c));
    const std::size_t r1 = std::min(r0 + 1, rows - 1), c1 = std::min(c0 + 1, cols - 1);
    const double fr = r - static_cast<double>(r0), fc = c - static_cast<double>(c0);
    const double top = grid[r0 * cols + c0] * (1.0 - fc) + grid[r0 * cols + c1] * fc;
    const double bottom = grid[r1 * cols + c0] * (1.0 - fc) + grid[r1 * cols + c1] * fc;
    return top * (1.0 - fr) + bottom * fr;
}

}  // namespace

Tensor applyTrigger(const Tensor& x, const PoisonSpec& spec) {
    spec.validate();
    if (x.rank() != 3) throw DimensionError("trigger input must be (c, h, w)");
    const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out = x;
    switch (spec.kind) {
    case TriggerKind::patch: {
        const std::size_t ph = spec.patch.dim(1), pw = spec.patch.dim(2);
        if (spec.patch.dim(0) != ch || spec.patchRow + ph > h || spec.patchCol + pw > w) {
            throw ValidationError("patch exceeds the image bounds");
        }
        for (std::size_t c = 0; c < ch; ++c) {
            for (std::size_t i = 0; i < ph; ++i) {
                for (std::size_t j = 0; j < pw; ++j) {
                    out.data[(c * h + spec.patchRow + i) * w + spec.patchCol + j] =
                        spec.patch.data[(c * ph + i) * pw + j];
                }
            }
        }
        break;
    }
    case TriggerKind::blend: {
        if (spec.blendImage.shape != x.shape) {
            throw DimensionError("blend image shape does not match the input");
        }
        const double a = spec.blendAlpha;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] = (1.0 - a) * x.data[i] + a * spec.blendImage.data[i];
        }
        break;
    }
    case TriggerKind::warp: {
        const std::size_t g = spec.warpGrid.dim(1), gc = spec.warpGrid.dim(2);
        const double* dyGrid = spec.warpGrid.data.data();
        const double* dxGrid = dyGrid + g * gc;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                // Pixel centres map onto the grid's corner-aligned coordinates.
                const double gr = h > 1 ? static_cast<double>(i) * (g - 1) / (h - 1) : 0.0;
                const double gcol = w > 1 ? static_cast<double>(j) * (gc - 1) / (w - 1) : 0.0;
                const double sy = static_cast<double>(i) +
                                  spec.warpStrength * bilinear(dyGrid, g, gc, gr, gcol);
                const double sx = static_cast<double>(j) +
                                  spec.warpStrength * bilinear(dxGrid, g, gc, gr, gcol);
                for (std::size_t c = 0; c < ch; ++c) {
                    out.data[(c * h + i) * w + j] = bilinear(&x.data[c * h * w], h, w, sy, sx);
                }
            }
        }
        break;
    }
    }
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

PoisonedDataset poisonDataset(const Dataset& dataset, const PoisonSpec& spec) {
    spec.validate();
    if (dataset.count() == 0) throw ValidationError("cannot poison an empty dataset");
    if (static_cast<std::size_t>(spec.targetLabel) >= dataset.classCount) {
        throw ValidationError("target label outside the dataset's classes");
    }
    const auto count = static_cast<std::size_t>(
        std::llround(spec.rate * static_cast<double>(dataset.count())));
    if (count == 0) throw ValidationError("poison rate selects zero samples");

    PoisonedDataset out;
    out.data = dataset;
    Rng rng(Rng::derive(spec.seed, 0x9015));
    out.poisonedIndices = rng.sampleWithoutReplacement(dataset.count(), count);
    const Shape shape = dataset.sampleShape();
    for (auto i : out.poisonedIndices) {
        const auto src = dataset.sample(i);
        const Tensor x(shape, std::vector<double>(src.begin(), src.end()));
        const Tensor poisoned = applyTrigger(x, spec);
        std::copy(poisoned.data.begin(), poisoned.data.end(), out.data.sample(i).begin());
        out.data.labels[i] = spec.targetLabel;
    }
    return out;
}

double attackSuccessRate(const Model& model, const Dataset& cleanTest, const PoisonSpec& spec) {
    spec.validate();
    std::vector<std::size_t> applicable;
    for (std::size_t i = 0; i < cleanTest.count(); ++i) {
        if (cleanTest.labels[i] != spec.targetLabel) applicable.push_back(i);
    }
    if (applicable.empty()) {
        throw ValidationError("no test inputs outside the target label");
    }
    Dataset triggered = cleanTest.subset(applicable);
    const Shape shape = cleanTest.sampleShape();
    for (std::size_t i = 0; i < triggered.count(); ++i) {
        const auto src = triggered.sample(i);
        const Tensor x = applyTrigger(Tensor(shape, std::vector<double>(src.begin(), src.end())),
                                      spec);
        std::copy(x.data.begin(), x.data.end(), triggered.sample(i).begin());
    }
    const auto predicted = predict(model, triggered.images);
    const auto hits = std::count(predicted.begin(), predicted.end(), spec.targetLabel);
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

namespace {

nlohmann::json tensorJson(const Tensor& t) { return {{"shape", t.shape}, {"data", t.data}}; }

Tensor tensorFromJson(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

void to_json(nlohmann::json& j, const PoisonSpec& spec) {
    j = nlohmann::json{{"kind", toString(spec.kind)},
                       {"targetLabel", spec.targetLabel},
                       {"rate", spec.rate},
                       {"seed", spec.seed}};
    switch (spec.kind) {
    case TriggerKind::patch:
        j["patch"] = {{"image", tensorJson(spec.patch)},
                      {"row", spec.patchRow},
                      {"col", spec.patchCol}};
        break;
    case TriggerKind::blend:
        j["blend"] = {{"image", tensorJson(spec.blendImage)}, {"alpha", spec.blendAlpha}};
        break;
    case TriggerKind::warp:
        j["warp"] = {{"grid", tensorJson(spec.warpGrid)}, {"strength", spec.warpStrength}};
        break;
    }
}

void from_json(const nlohmann::json& j, PoisonSpec& spec) {
    spec = PoisonSpec{};
    spec.kind = triggerKindFromString(j.at("kind").get<std::string>());
    j.at("targetLabel").get_to(spec.targetLabel);
    j.at("rate").get_to(spec.rate);
    spec.seed = j.value("seed", std::uint64_t{0});
    switch (spec.kind) {
    case TriggerKind::patch: {
        const auto& p = j.at("patch");
        spec.patch = tensorFromJson(p.at("image"));
        p.at("row").get_to(spec.patchRow);
        p.at("col").get_to(spec.patchCol);
        break;
    }
    case TriggerKind::blend: {
        const auto& b = j.at("blend");
        spec.blendImage = tensorFromJson(b.at("image"));
        b.at("alpha").get_to(spec.blendAlpha);
        break;
    }
    case TriggerKind::warp: {
        const auto& w = j.at("warp");
        spec.warpGrid = tensorFromJson(w.at("grid"));
        w.at("strength").get_to(spec.warpStrength);
        break;
    }
    }
}

}  // namespace lora_audit
