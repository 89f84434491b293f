// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lora_audit/errors.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

std::string toString(LayerKind kind) {
    switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    }
    return "unknown";
}

LayerKind layerKindFromString(const std::string& name) {
    if (name == "dense") return LayerKind::dense;
    if (name == "conv2d") return LayerKind::conv2d;
    if (name == "relu") return LayerKind::relu;
    if (name == "flatten") return LayerKind::flatten;
    throw ValidationError("unknown layer kind '" + name + "'");
}

std::string toString(OptimizerKind kind) {
    return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind optimizerKindFromString(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    throw ValidationError("unknown optimizer '" + name + "'");
}

Layer Layer::dense(std::size_t in, std::size_t out) {
    if (in == 0 || out == 0) throw ValidationError("dense layer dimensions must be positive");
    Layer layer;
    layer.kind = LayerKind::dense;
    layer.weights = Tensor({out, in});
    layer.bias = Tensor({out});
    return layer;
}

Layer Layer::conv2d(const ConvGeometry& g) {
    if (g.inChannels == 0 || g.outChannels == 0 || g.kernel == 0 || g.kernel > g.inHeight ||
        g.kernel > g.inWidth) {
        throw ValidationError("invalid conv2d geometry");
    }
    Layer layer;
    layer.kind = LayerKind::conv2d;
    layer.conv = g;
    layer.weights = Tensor({g.outChannels, g.inChannels, g.kernel, g.kernel});
    layer.bias = Tensor({g.outChannels});
    return layer;
}

Layer Layer::relu() {
    Layer layer;
    layer.kind = LayerKind::relu;
    return layer;
}

Layer Layer::flatten() {
    Layer layer;
    layer.kind = LayerKind::flatten;
    return layer;
}

namespace {

Shape outputShape(const Layer& layer, const Shape& in) {
    switch (layer.kind) {
    case LayerKind::dense:
        if (in.size() != 1 || in[0] != layer.inFeatures()) {
            throw DimensionError("dense layer expects (" + std::to_string(layer.inFeatures()) +
                                 "), got " + shapeString(in));
        }
        return {layer.outFeatures()};
    case LayerKind::conv2d: {
        const auto& g = layer.conv;
        if (in != Shape{g.inChannels, g.inHeight, g.inWidth}) {
            throw DimensionError("conv2d layer expects " +
                                 shapeString(Shape{g.inChannels, g.inHeight, g.inWidth}) +
                                 ", got " + shapeString(in));
        }
        return {g.outChannels, g.outHeight(), g.outWidth()};
    }
    case LayerKind::relu: return in;
    case LayerKind::flatten: return {shapeProduct(in)};
    }
    return in;
}

}  // namespace

Shape Model::layerInputShape(std::size_t index) const {
    if (index > layers.size()) throw DimensionError("layer index out of range");
    Shape shape = inputShape;
    for (std::size_t i = 0; i < index; ++i) shape = outputShape(layers[i], shape);
    return shape;
}

void Model::validate() const {
    if (classCount == 0) throw ValidationError("model needs at least one class");
    const Shape out = layerInputShape(layers.size());
    if (out != Shape{classCount}) {
        throw DimensionError("model output " + shapeString(out) + " does not match " +
                             std::to_string(classCount) + " classes");
    }
}

void Model::initialize(std::uint64_t initSeed) {
    seed = initSeed;
    Rng rng(initSeed);
    for (auto& layer : layers) {
        if (!layer.hasParameters()) continue;
        const std::size_t fanIn = layer.weights.size() / layer.weights.dim(0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fanIn));
        for (double& w : layer.weights.data) w = rng.uniform(-bound, bound);
        std::fill(layer.bias.data.begin(), layer.bias.data.end(), 0.0);
    }
}

void Model::setFrozen(bool frozen) {
    for (auto& layer : layers) layer.frozen = frozen;
}

Model makeMlp(const Shape& inputShape, std::span<const std::size_t> hidden,
              std::size_t classCount, std::uint64_t seed) {
    Model model;
    model.inputShape = inputShape;
    model.classCount = classCount;
    model.layers.push_back(Layer::flatten());
    std::size_t width = shapeProduct(inputShape);
    for (std::size_t h : hidden) {
        model.layers.push_back(Layer::dense(width, h));
        model.layers.push_back(Layer::relu());
        width = h;
    }
    model.layers.push_back(Layer::dense(width, classCount));
    model.validate();
    model.initialize(seed);
    return model;
}

Model makeCnn(const Shape& inputShape, std::size_t conv1Channels, std::size_t conv2Channels,
              std::size_t kernel, std::size_t classCount, std::uint64_t seed,
              std::size_t hidden) {
    if (inputShape.size() != 3) throw DimensionError("CNN input must be (channels, height, width)");
    Model model;
    model.inputShape = inputShape;
    model.classCount = classCount;
    ConvGeometry first{inputShape[0], conv1Channels, kernel, inputShape[1], inputShape[2]};
    ConvGeometry second{conv1Channels, conv2Channels, kernel, first.outHeight(), first.outWidth()};
    model.layers.push_back(Layer::conv2d(first));
    model.layers.push_back(Layer::relu());
    model.layers.push_back(Layer::conv2d(second));
    model.layers.push_back(Layer::relu());
    model.layers.push_back(Layer::flatten());
    const std::size_t features = conv2Channels * second.outHeight() * second.outWidth();
    if (hidden > 0) {
        model.layers.push_back(Layer::dense(features, hidden));
        model.layers.push_back(Layer::relu());
        model.layers.push_back(Layer::dense(hidden, classCount));
    } else {
        model.layers.push_back(Layer::dense(features, classCount));
    }
    model.validate();
    model.initialize(seed);
    return model;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

namespace {

void checkBatch(const Model& model, const Tensor& batch, std::size_t firstLayer) {
    if (firstLayer > model.layers.size()) throw DimensionError("first layer out of range");
    const Shape expected = model.layerInputShape(firstLayer);
    if (batch.rank() != expected.size() + 1 ||
        !std::equal(expected.begin(), expected.end(), batch.shape.begin() + 1)) {
        throw DimensionError("batch shape " + shapeString(batch.shape) +
                             " does not match layer input (N, " +
                             shapeString(expected).substr(1));
    }
    if (batch.dim(0) == 0) throw DimensionError("empty batch");
}

const LowRankTerm* findTerm(std::span<const LowRankTerm> terms, std::size_t layer,
                            std::size_t* position) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].layerIndex == layer) {
            if (position) *position = i;
            return &terms[i];
        }
    }
    return nullptr;
}

void checkTerms(const Model& model, std::span<const LowRankTerm> terms) {
    for (const auto& term : terms) {
        if (term.layerIndex >= model.layers.size() ||
            model.layers[term.layerIndex].kind != LayerKind::dense) {
            throw PlacementError("low-rank term must target a dense layer");
        }
        const Layer& layer = model.layers[term.layerIndex];
        if (!term.down || !term.up || term.down->rank() != 2 || term.up->rank() != 2 ||
            term.down->dim(1) != layer.inFeatures() || term.up->dim(0) != layer.outFeatures() ||
            term.down->dim(0) != term.up->dim(1)) {
            throw DimensionError("low-rank term shapes do not match the dense layer");
        }
    }
}

Tensor denseForward(const Layer& layer, const Tensor& x, const LowRankTerm* term,
                    Tensor* projected) {
    Tensor y = matmulTransB(x, layer.weights);
    const std::size_t n = y.dim(0), out = y.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < out; ++j) y.data[i * out + j] += layer.bias.data[j];
    }
    if (term && term->scale != 0.0) {
        Tensor p = matmulTransB(x, *term->down);
        const Tensor q = matmulTransB(p, *term->up);
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += term->scale * q.data[i];
        if (projected) *projected = std::move(p);
    } else if (term && projected) {
        *projected = matmulTransB(x, *term->down);
    }
    return y;
}

// Unfolds one (C, H, W) sample into a (C*k*k, oh*ow) patch matrix.
void im2col(const ConvGeometry& g, const double* in, std::vector<double>& cols) {
    const std::size_t k = g.kernel, oh = g.outHeight(), ow = g.outWidth(), plane = oh * ow;
    cols.resize(g.inChannels * k * k * plane);
    double* dst = cols.data();
    for (std::size_t c = 0; c < g.inChannels; ++c) {
        const double* channel = in + c * g.inHeight * g.inWidth;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj, dst += plane) {
                for (std::size_t i = 0; i < oh; ++i) {
                    const double* src = channel + (i + ki) * g.inWidth + kj;
                    std::copy(src, src + ow, dst + i * ow);
                }
            }
        }
    }
}

// Adds a (C*k*k, oh*ow) patch-gradient matrix back onto one (C, H, W) sample.
void col2imAdd(const ConvGeometry& g, const std::vector<double>& cols, double* out) {
    const std::size_t k = g.kernel, oh = g.outHeight(), ow = g.outWidth(), plane = oh * ow;
    const double* src = cols.data();
    for (std::size_t c = 0; c < g.inChannels; ++c) {
        double* channel = out + c * g.inHeight * g.inWidth;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj, src += plane) {
                for (std::size_t i = 0; i < oh; ++i) {
                    double* dst = channel + (i + ki) * g.inWidth + kj;
                    const double* row = src + i * ow;
                    for (std::size_t j = 0; j < ow; ++j) dst[j] += row[j];
                }
            }
        }
    }
}

Tensor convForward(const Layer& layer, const Tensor& x) {
    const auto& g = layer.conv;
    const std::size_t n = x.dim(0), plane = g.outHeight() * g.outWidth();
    const std::size_t patch = g.inChannels * g.kernel * g.kernel;
    const std::size_t inSize = g.inChannels * g.inHeight * g.inWidth;
    Tensor y({n, g.outChannels, g.outHeight(), g.outWidth()});
    std::vector<double> cols;
    for (std::size_t b = 0; b < n; ++b) {
        im2col(g, &x.data[b * inSize], cols);
        for (std::size_t o = 0; o < g.outChannels; ++o) {
            double* out = &y.data[(b * g.outChannels + o) * plane];
            std::fill(out, out + plane, layer.bias.data[o]);
            const double* w = &layer.weights.data[o * patch];
            for (std::size_t r = 0; r < patch; ++r) {
                const double wv = w[r];
                const double* src = &cols[r * plane];
                for (std::size_t p = 0; p < plane; ++p) out[p] += wv * src[p];
            }
        }
    }
    return y;
}

void convBackward(const Layer& layer, const Tensor& x, const Tensor& dy, Tensor* dw, Tensor* db,
                  Tensor* dx) {
    const auto& g = layer.conv;
    const std::size_t n = x.dim(0), plane = g.outHeight() * g.outWidth();
    const std::size_t patch = g.inChannels * g.kernel * g.kernel;
    const std::size_t inSize = g.inChannels * g.inHeight * g.inWidth;
    std::vector<double> cols, dcols;
    for (std::size_t b = 0; b < n; ++b) {
        if (dw) im2col(g, &x.data[b * inSize], cols);
        if (dx) dcols.assign(patch * plane, 0.0);
        for (std::size_t o = 0; o < g.outChannels; ++o) {
            const double* grad = &dy.data[(b * g.outChannels + o) * plane];
            if (db) {
                double s = 0.0;
                for (std::size_t p = 0; p < plane; ++p) s += grad[p];
                db->data[o] += s;
            }
            const double* w = &layer.weights.data[o * patch];
            for (std::size_t r = 0; r < patch; ++r) {
                if (dw) {
                    const double* src = &cols[r * plane];
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    std::size_t p = 0;
                    for (; p + 4 <= plane; p += 4) {
                        a0 += grad[p] * src[p];
                        a1 += grad[p + 1] * src[p + 1];
                        a2 += grad[p + 2] * src[p + 2];
                        a3 += grad[p + 3] * src[p + 3];
                    }
                    for (; p < plane; ++p) a0 += grad[p] * src[p];
                    dw->data[o * patch + r] += (a0 + a1) + (a2 + a3);
                }
                if (dx) {
                    const double wv = w[r];
                    double* dst = &dcols[r * plane];
                    for (std::size_t p = 0; p < plane; ++p) dst[p] += wv * grad[p];
                }
            }
        }
        if (dx) col2imAdd(g, dcols, &dx->data[b * inSize]);
    }
}

struct ForwardCache {
    std::vector<Tensor> inputs;     // inputs[k - first] = input to layer k
    std::vector<Tensor> projected;  // per term: x * down^T
    Tensor logits;
};

ForwardCache runForward(const Model& model, const Tensor& batch,
                        std::span<const LowRankTerm> terms, std::size_t firstLayer,
                        std::size_t stopLayer, bool keepInputs) {
    ForwardCache cache;
    cache.projected.resize(terms.size());
    Tensor x = batch;
    for (std::size_t k = firstLayer; k < stopLayer; ++k) {
        const Layer& layer = model.layers[k];
        Tensor y;
        switch (layer.kind) {
        case LayerKind::dense: {
            std::size_t pos = 0;
            const LowRankTerm* term = findTerm(terms, k, &pos);
            y = denseForward(layer, x, term, term && keepInputs ? &cache.projected[pos] : nullptr);
            break;
        }
        case LayerKind::conv2d: y = convForward(layer, x); break;
        case LayerKind::relu:
            y = x;
            for (double& v : y.data) v = v > 0.0 ? v : 0.0;
            break;
        case LayerKind::flatten:
            y = x.reshaped({x.dim(0), x.size() / x.dim(0)});
            break;
        }
        if (keepInputs) {
            cache.inputs.push_back(std::move(x));
        }
        x = std::move(y);
    }
    cache.logits = std::move(x);
    return cache;
}

}  // namespace

Tensor forward(const Model& model, const Tensor& batch, std::span<const LowRankTerm> terms,
               std::size_t firstLayer) {
    checkBatch(model, batch, firstLayer);
    checkTerms(model, terms);
    return runForward(model, batch, terms, firstLayer, model.layers.size(), false).logits;
}

Tensor forwardTo(const Model& model, const Tensor& batch, std::size_t stopLayer) {
    checkBatch(model, batch, 0);
    if (stopLayer > model.layers.size()) throw DimensionError("stop layer out of range");
    return runForward(model, batch, {}, 0, stopLayer, false).logits;
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw DimensionError("softmax expects (batch, classes)");
    Tensor p = logits;
    const std::size_t n = p.dim(0), k = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &p.data[i * k];
        const double peak = *std::max_element(row, row + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            row[j] = std::exp(row[j] - peak);
            total += row[j];
        }
        for (std::size_t j = 0; j < k; ++j) row[j] /= total;
    }
    return p;
}

LossAndGradients lossAndGradients(const Model& model, const Tensor& batch,
                                  std::span<const int> labels, std::span<const LowRankTerm> terms,
                                  const PassOptions& options) {
    checkBatch(model, batch, options.firstLayer);
    checkTerms(model, terms);
    const std::size_t n = batch.dim(0);
    if (labels.size() != n) throw ValidationError("label count does not match batch size");
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= model.classCount) {
            throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(model.classCount) + ")");
        }
    }

    ForwardCache cache =
        runForward(model, batch, terms, options.firstLayer, model.layers.size(), true);
    const std::size_t classes = model.classCount;
    Tensor probs = softmax(cache.logits);

    LossAndGradients result;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loss -= std::log(std::max(probs.data[i * classes + labels[i]], 1e-300));
    }
    result.loss = loss / static_cast<double>(n);

    // d loss / d logits = (p - onehot) / n
    Tensor grad = std::move(probs);
    for (std::size_t i = 0; i < n; ++i) grad.data[i * classes + labels[i]] -= 1.0;
    for (double& g : grad.data) g /= static_cast<double>(n);

    Gradients& grads = result.grads;
    grads.weights.resize(model.layers.size());
    grads.bias.resize(model.layers.size());
    grads.down.resize(terms.size());
    grads.up.resize(terms.size());

    // Lowest layer whose input gradient is still needed.
    std::size_t lowest = options.inputGradient ? options.firstLayer : model.layers.size();
    for (std::size_t k = options.firstLayer; k < model.layers.size(); ++k) {
        const Layer& layer = model.layers[k];
        const bool paramsWanted = options.parameterGradients && layer.hasParameters() &&
                                  !layer.frozen;
        if (paramsWanted || findTerm(terms, k, nullptr)) {
            lowest = std::min(lowest, k);
        }
    }

    for (std::size_t k = model.layers.size(); k-- > options.firstLayer;) {
        const Layer& layer = model.layers[k];
        const Tensor& x = cache.inputs[k - options.firstLayer];
        const bool needInput = k > lowest || (k == options.firstLayer && options.inputGradient);
        const bool paramsWanted = options.parameterGradients && layer.hasParameters();
        if (paramsWanted) {
            grads.weights[k] = Tensor(layer.weights.shape);
            grads.bias[k] = Tensor(layer.bias.shape);
        }
        const bool computeParams = paramsWanted && !layer.frozen;

        Tensor dx;
        switch (layer.kind) {
        case LayerKind::dense: {
            if (computeParams) {
                grads.weights[k] = matmulTransA(grad, x);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < layer.outFeatures(); ++j) {
                        grads.bias[k].data[j] += grad.data[i * layer.outFeatures() + j];
                    }
                }
            }
            std::size_t pos = 0;
            const LowRankTerm* term = findTerm(terms, k, &pos);
            Tensor gradUp;  // grad * up, (n, r)
            if (term) {
                gradUp = matmul(grad, *term->up);
                grads.up[pos] = matmulTransA(grad, cache.projected[pos]);
                grads.down[pos] = matmulTransA(gradUp, x);
                for (double& v : grads.up[pos].data) v *= term->scale;
                for (double& v : grads.down[pos].data) v *= term->scale;
            }
            if (needInput) {
                dx = matmul(grad, layer.weights);
                if (term && term->scale != 0.0) {
                    const Tensor extra = matmul(gradUp, *term->down);
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                        dx.data[i] += term->scale * extra.data[i];
                    }
                }
            }
            break;
        }
        case LayerKind::conv2d:
            if (needInput) dx = Tensor(x.shape);
            if (computeParams || needInput) {
                convBackward(layer, x, grad, computeParams ? &grads.weights[k] : nullptr,
                             computeParams ? &grads.bias[k] : nullptr,
                             needInput ? &dx : nullptr);
            }
            break;
        case LayerKind::relu:
            if (needInput) {
                dx = std::move(grad);
                for (std::size_t i = 0; i < dx.size(); ++i) {
                    if (!(x.data[i] > 0.0)) dx.data[i] = 0.0;
                }
            }
            break;
        case LayerKind::flatten:
            if (needInput) dx = grad.reshaped(x.shape);
            break;
        }
        if (!needInput) {
            // Nothing below this layer needs a gradient; parameter-gradient slots of the
            // untouched layers stay zero-filled.
            for (std::size_t j = options.firstLayer; j < k; ++j) {
                const Layer& below = model.layers[j];
                if (options.parameterGradients && below.hasParameters()) {
                    grads.weights[j] = Tensor(below.weights.shape);
                    grads.bias[j] = Tensor(below.bias.shape);
                }
            }
            break;
        }
        grad = std::move(dx);
        if (k == options.firstLayer && options.inputGradient) grads.input = std::move(grad);
    }
    return result;
}

std::vector<int> predict(const Model& model, const Tensor& batch) {
    const Tensor logits = forward(model, batch);
    const std::size_t k = logits.dim(1);
    std::vector<int> out(logits.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = &logits.data[i * k];
        out[i] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

double accuracy(const Model& model, const Dataset& data) {
    if (data.count() == 0) throw ValidationError("accuracy of an empty dataset");
    constexpr std::size_t kChunk = 256;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < data.count(); first += kChunk) {
        const std::size_t count = std::min(kChunk, data.count() - first);
        const auto predicted = predict(model, sliceRows(data.images, first, count));
        for (std::size_t i = 0; i < count; ++i) {
            correct += predicted[i] == data.labels[first + i];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.count());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(learningRate >= 0.0) || !std::isfinite(learningRate)) {
        throw ValidationError("learning rate must be finite and non-negative");
    }
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batchSize < 1) throw ValidationError("batch size must be >= 1");
}

Optimizer::Optimizer(OptimizerKind kind, double learningRate)
    : kind_(kind), learningRate_(learningRate) {}

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    if (params.size() != grads.size()) throw DimensionError("optimizer slot count mismatch");
    ++steps_;
    if (kind_ == OptimizerKind::sgd) {
        for (std::size_t s = 0; s < params.size(); ++s) {
            if (!params[s]) continue;
            auto& w = params[s]->data;
            const auto& g = grads[s]->data;
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learningRate_ * g[i];
        }
        return;
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (firstMoment_.size() != params.size()) {
        firstMoment_.assign(params.size(), Tensor());
        secondMoment_.assign(params.size(), Tensor());
    }
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (std::size_t s = 0; s < params.size(); ++s) {
        if (!params[s]) continue;
        auto& w = params[s]->data;
        const auto& g = grads[s]->data;
        if (firstMoment_[s].size() != w.size()) {
            firstMoment_[s] = Tensor(params[s]->shape);
            secondMoment_[s] = Tensor(params[s]->shape);
        }
        auto& m = firstMoment_[s].data;
        auto& v = secondMoment_[s].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= learningRate_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
}

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(model), config_(config), optimizer_(config.optimizer, config.learningRate) {
    config_.validate();
}

double Trainer::trainEpoch(const Dataset& data) {
    if (data.count() == 0) throw ValidationError("cannot train on an empty dataset");
    std::vector<std::size_t> order(data.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::derive(config_.seed, epoch_));
    rng.shuffle(std::span<std::size_t>(order));

    double lossSum = 0.0;
    std::size_t batches = 0;
    std::vector<int> labels;
    for (std::size_t first = 0; first < order.size(); first += config_.batchSize) {
        const std::size_t count = std::min(config_.batchSize, order.size() - first);
        const std::span<const std::size_t> idx(order.data() + first, count);
        const Tensor batch = gatherRows(data.images, idx);
        labels.resize(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = data.labels[idx[i]];

        auto [loss, grads] = lossAndGradients(model_, batch, labels);
        std::vector<Tensor*> params;
        std::vector<const Tensor*> slots;
        for (std::size_t k = 0; k < model_.layers.size(); ++k) {
            Layer& layer = model_.layers[k];
            if (!layer.hasParameters()) continue;
            params.push_back(layer.frozen ? nullptr : &layer.weights);
            slots.push_back(&grads.weights[k]);
            params.push_back(layer.frozen ? nullptr : &layer.bias);
            slots.push_back(&grads.bias[k]);
        }
        optimizer_.step(params, slots);
        lossSum += loss;
        ++batches;
    }
    ++epoch_;
    return lossSum / static_cast<double>(batches);
}

std::vector<double> train(Model& model, const Dataset& data, const TrainConfig& config) {
    Trainer trainer(model, config);
    std::vector<double> losses;
    losses.reserve(config.epochs);
    for (std::size_t e = 0; e < config.epochs; ++e) losses.push_back(trainer.trainEpoch(data));
    return losses;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'R', 'A', 'U', 'D', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}
    void u64(std::uint64_t v) {
        char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(bytes, 8);
    }
    void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void tensor(const Tensor& t) {
        u64(t.rank());
        for (auto d : t.shape) u64(d);
        for (double v : t.data) f64(v);
    }

private:
    std::ostream& out_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}
    std::uint64_t u64() {
        unsigned char bytes[8];
        read(bytes, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        return v;
    }
    std::uint8_t u8() {
        unsigned char b;
        read(&b, 1);
        return b;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    Tensor tensor() {
        const std::uint64_t rank = u64();
        if (rank > 8) throw FormatError("checkpoint tensor rank " + std::to_string(rank));
        if (rank == 0) return Tensor();  // parameterless layers store empty tensors
        Shape shape(rank);
        for (auto& d : shape) d = u64();
        const std::size_t count = shapeProduct(shape);
        if (count > (std::size_t{1} << 32)) throw FormatError("checkpoint tensor too large");
        std::vector<double> data(count);
        for (double& v : data) v = f64();
        return Tensor(std::move(shape), std::move(data));
    }
    void read(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n)) {
            throw IoError("checkpoint truncated");
        }
    }

private:
    std::istream& in_;
};

}  // namespace

void saveCheckpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    Writer w(out);
    w.u64(kCheckpointVersion);
    w.u64(model.seed);
    w.u64(model.classCount);
    w.u64(model.inputShape.size());
    for (auto d : model.inputShape) w.u64(d);
    w.u64(model.layers.size());
    for (const auto& layer : model.layers) {
        w.u8(static_cast<std::uint8_t>(layer.kind));
        w.u8(layer.frozen ? 1 : 0);
        w.u64(layer.conv.inChannels);
        w.u64(layer.conv.outChannels);
        w.u64(layer.conv.kernel);
        w.u64(layer.conv.inHeight);
        w.u64(layer.conv.inWidth);
        w.tensor(layer.weights);
        w.tensor(layer.bias);
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model loadCheckpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8) throw IoError("checkpoint truncated");
    if (!std::equal(magic, magic + 8, kCheckpointMagic)) {
        throw FormatError(path.string() + " is not a model checkpoint");
    }
    Reader r(in);
    if (r.u64() != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    Model model;
    model.seed = r.u64();
    model.classCount = r.u64();
    model.inputShape.resize(r.u64());
    for (auto& d : model.inputShape) d = r.u64();
    const std::uint64_t layerCount = r.u64();
    if (layerCount > 1024) throw FormatError("implausible layer count");
    for (std::uint64_t i = 0; i < layerCount; ++i) {
        Layer layer;
        const auto kind = r.u8();
        if (kind > static_cast<std::uint8_t>(LayerKind::flatten)) {
            throw FormatError("unknown layer kind in checkpoint");
        }
        layer.kind = static_cast<LayerKind>(kind);
        layer.frozen = r.u8() != 0;
        layer.conv = {r.u64(), r.u64(), r.u64(), r.u64(), r.u64()};
        layer.weights = r.tensor();
        layer.bias = r.tensor();
        model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
}

}  // namespace lora_audit
