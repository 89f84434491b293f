// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/experiment.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "lora_audit/errors.hpp"
#include "lora_audit/geometry.hpp"
#include "lora_audit/random.hpp"

namespace lora_audit {

namespace {

// Seed streams of the paired membership protocol.
constexpr std::uint64_t kSplitStream = 1000;
constexpr std::uint64_t kModelStream = 2000;
constexpr std::uint64_t kTrainStream = 3000;
constexpr std::uint64_t kAuditStream = 4000;
constexpr std::uint64_t kHoldoutStream = 5000;

void rejectUnknownKeys(const nlohmann::json& j, std::initializer_list<const char*> known,
                       const std::string& section) {
    if (!j.is_object()) throw ValidationError(section + " must be an object");
    const std::set<std::string> allowed(known.begin(), known.end());
    for (const auto& item : j.items()) {
        if (!allowed.contains(item.key())) {
            throw ValidationError("unknown key '" + item.key() + "' in " + section);
        }
    }
}

nlohmann::json trainConfigJson(const TrainConfig& c) {
    return {{"learningRate", c.learningRate},
            {"epochs", c.epochs},
            {"batchSize", c.batchSize},
            {"seed", c.seed},
            {"optimizer", toString(c.optimizer)}};
}

TrainConfig trainConfigFromJson(const nlohmann::json& j, const TrainConfig& d) {
    rejectUnknownKeys(j, {"learningRate", "epochs", "batchSize", "seed", "optimizer"}, "training");
    TrainConfig c;
    c.learningRate = j.value("learningRate", d.learningRate);
    c.epochs = j.value("epochs", d.epochs);
    c.batchSize = j.value("batchSize", d.batchSize);
    c.seed = j.value("seed", d.seed);
    c.optimizer = optimizerKindFromString(j.value("optimizer", toString(d.optimizer)));
    return c;
}

double mean(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::string toString(Mode mode) {
    switch (mode) {
        case Mode::train: return "train";
        case Mode::poison: return "poison";
        case Mode::auditMembership: return "audit-membership";
        case Mode::auditBackdoor: return "audit-backdoor";
        case Mode::sweep: return "sweep";
    }
    throw ValidationError("unknown mode");
}

Mode modeFromString(const std::string& name) {
    for (Mode m : {Mode::train, Mode::poison, Mode::auditMembership, Mode::auditBackdoor,
                   Mode::sweep}) {
        if (toString(m) == name) return m;
    }
    throw ValidationError("unknown mode '" + name + "'");
}

void DatasetSpec::validate() const {
    if (source == "synthetic") {
        if (classCount < 2) throw ValidationError("synthetic data needs at least two classes");
        if (perClass == 0 || imageSize == 0) throw ValidationError("synthetic data is empty");
        if (!(noise >= 0.0)) throw ValidationError("noise must be non-negative");
    } else if (source == "idx") {
        if (imagesPath.empty() || labelsPath.empty()) {
            throw ValidationError("idx source needs imagesPath and labelsPath");
        }
    } else {
        throw ValidationError("dataset source must be synthetic or idx, got " + source);
    }
    if (downsample == 0) throw ValidationError("downsample factor must be >= 1");
}

void ModelSpec::validate() const {
    if (architecture != "mlp" && architecture != "cnn") {
        throw ValidationError("architecture must be mlp or cnn, got " + architecture);
    }
    if (architecture == "mlp" &&
        std::any_of(hidden.begin(), hidden.end(), [](std::size_t h) { return h == 0; })) {
        throw ValidationError("hidden widths must be positive");
    }
    if (architecture == "cnn" && (conv1Channels == 0 || conv2Channels == 0 || kernel == 0)) {
        throw ValidationError("convolution sizes must be positive");
    }
    training.validate();
}

void AttackSpec::validate(std::size_t classCount) const {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("poison rate must lie in [0, 1]");
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= classCount) {
            throw ValidationError("target label out of range: " + std::to_string(t));
        }
    }
    for (double r : sweepRates) {
        if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("sweep rates must lie in [0, 1]");
    }
}

void ExperimentConfig::validate() const {
    dataset.validate();
    if (testDataset) testDataset->validate();
    model.validate();
    membership.validate();
    backdoor.validate();
    attack.validate(dataset.classCount);
    if (mode == Mode::auditMembership && repetitions == 0) {
        throw ValidationError("at least one repetition is required");
    }
    if (mode == Mode::sweep && attack.sweepRates.empty()) {
        throw ValidationError("sweep needs at least one rate");
    }
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
    j = {{"source", s.source},       {"imagesPath", s.imagesPath}, {"labelsPath", s.labelsPath},
         {"classCount", s.classCount}, {"perClass", s.perClass},   {"imageSize", s.imageSize},
         {"noise", s.noise},         {"seed", s.seed},             {"downsample", s.downsample}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
    rejectUnknownKeys(j,
                      {"source", "imagesPath", "labelsPath", "classCount", "perClass", "imageSize",
                       "noise", "seed", "downsample"},
                      "dataset");
    const DatasetSpec d;
    s.source = j.value("source", d.source);
    s.imagesPath = j.value("imagesPath", d.imagesPath);
    s.labelsPath = j.value("labelsPath", d.labelsPath);
    s.classCount = j.value("classCount", d.classCount);
    s.perClass = j.value("perClass", d.perClass);
    s.imageSize = j.value("imageSize", d.imageSize);
    s.noise = j.value("noise", d.noise);
    s.seed = j.value("seed", d.seed);
    s.downsample = j.value("downsample", d.downsample);
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = {{"architecture", s.architecture},   {"hidden", s.hidden},
         {"conv1Channels", s.conv1Channels}, {"conv2Channels", s.conv2Channels},
         {"kernel", s.kernel},               {"denseHidden", s.denseHidden},
         {"training", trainConfigJson(s.training)}, {"checkpoint", s.checkpoint}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
    rejectUnknownKeys(j,
                      {"architecture", "hidden", "conv1Channels", "conv2Channels", "kernel",
                       "denseHidden", "training", "checkpoint"},
                      "model");
    const ModelSpec d;
    s.architecture = j.value("architecture", d.architecture);
    s.hidden = j.value("hidden", d.hidden);
    s.conv1Channels = j.value("conv1Channels", d.conv1Channels);
    s.conv2Channels = j.value("conv2Channels", d.conv2Channels);
    s.kernel = j.value("kernel", d.kernel);
    s.denseHidden = j.value("denseHidden", d.denseHidden);
    s.training = trainConfigFromJson(j.value("training", nlohmann::json::object()), d.training);
    s.checkpoint = j.value("checkpoint", d.checkpoint);
}

void to_json(nlohmann::json& j, const LoraSpec& s) { j = {{"layers", s.layers}}; }

void from_json(const nlohmann::json& j, LoraSpec& s) {
    rejectUnknownKeys(j, {"layers"}, "lora");
    s.layers = j.value("layers", std::vector<std::size_t>{});
}

void to_json(nlohmann::json& j, const AttackSpec& s) {
    j = {{"trigger", toString(s.trigger)},
         {"rate", s.rate},
         {"targets", s.targets},
         {"sweepRates", s.sweepRates}};
}

void from_json(const nlohmann::json& j, AttackSpec& s) {
    rejectUnknownKeys(j, {"trigger", "rate", "targets", "sweepRates"}, "attack");
    const AttackSpec d;
    s.trigger = triggerKindFromString(j.value("trigger", toString(d.trigger)));
    s.rate = j.value("rate", d.rate);
    s.targets = j.value("targets", d.targets);
    s.sweepRates = j.value("sweepRates", d.sweepRates);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"mode", toString(c.mode)},
         {"dataset", c.dataset},
         {"testDataset", c.testDataset ? nlohmann::json(*c.testDataset) : nlohmann::json()},
         {"model", c.model},
         {"lora", c.lora},
         {"membership", c.membership},
         {"backdoor", c.backdoor},
         {"attack", c.attack},
         {"repetitions", c.repetitions},
         {"outputDir", c.outputDir},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    rejectUnknownKeys(j,
                      {"mode", "dataset", "testDataset", "model", "lora", "membership", "backdoor",
                       "attack", "repetitions", "outputDir", "seed"},
                      "config");
    const ExperimentConfig d;
    c.mode = modeFromString(j.value("mode", toString(d.mode)));
    c.dataset = j.value("dataset", nlohmann::json::object()).get<DatasetSpec>();
    const auto test = j.find("testDataset");
    if (test != j.end() && !test->is_null()) {
        c.testDataset = test->get<DatasetSpec>();
    } else {
        c.testDataset.reset();
    }
    c.model = j.value("model", nlohmann::json::object()).get<ModelSpec>();
    c.lora = j.value("lora", nlohmann::json::object()).get<LoraSpec>();
    c.membership = j.value("membership", nlohmann::json::object()).get<MembershipConfig>();
    c.backdoor = j.value("backdoor", nlohmann::json::object()).get<BackdoorConfig>();
    c.attack = j.value("attack", nlohmann::json::object()).get<AttackSpec>();
    c.repetitions = j.value("repetitions", d.repetitions);
    c.outputDir = j.value("outputDir", d.outputDir);
    c.seed = j.value("seed", d.seed);
}

void applyOverride(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValidationError("override must look like key.path=value, got '" + assignment + "'");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    nlohmann::json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ValidationError("empty key in override path '" + path + "'");
        if (node->is_null()) *node = nlohmann::json::object();
        if (!node->is_object()) {
            throw ValidationError("override path '" + path + "' crosses a non-object value");
        }
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

Dataset loadDataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset data = spec.source == "synthetic"
                       ? genSynthetic(spec.classCount, spec.perClass, spec.imageSize, spec.noise,
                                      spec.seed)
                       : loadIdx(spec.imagesPath, spec.labelsPath, spec.classCount);
    if (spec.downsample > 1) data = downsample(data, spec.downsample);
    return data;
}

Model buildModel(const ModelSpec& spec, const Shape& sampleShape, std::size_t classCount,
                 std::uint64_t seed) {
    spec.validate();
    if (spec.architecture == "mlp") return makeMlp(sampleShape, spec.hidden, classCount, seed);
    return makeCnn(sampleShape, spec.conv1Channels, spec.conv2Channels, spec.kernel, classCount,
                   seed, spec.denseHidden);
}

std::vector<LoraPlacement> resolvePlacements(const LoraSpec& spec, const Model& model) {
    std::vector<LoraPlacement> placements;
    if (spec.layers.empty()) {
        for (std::size_t i = model.layers.size(); i-- > 0;) {
            if (model.layers[i].kind == LayerKind::dense) {
                placements.push_back({i});
                break;
            }
        }
        if (placements.empty()) throw PlacementError("model has no dense layer");
        return placements;
    }
    for (std::size_t i : spec.layers) {
        if (i >= model.layers.size() || model.layers[i].kind != LayerKind::dense) {
            throw PlacementError("layer " + std::to_string(i) + " is not a dense layer");
        }
        placements.push_back({i});
    }
    return placements;
}

DataSplit loadSplit(const ExperimentConfig& config) {
    Dataset all = loadDataset(config.dataset);
    if (config.testDataset) return {std::move(all), loadDataset(*config.testDataset)};
    Rng rng(Rng::derive(config.seed, kHoldoutStream));
    std::vector<std::size_t> order(all.count());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));
    const std::size_t testCount = all.count() / 5;
    std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<long>(testCount));
    std::vector<std::size_t> train(order.begin() + static_cast<long>(testCount), order.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {all.subset(train, all.name + "-train"), all.subset(test, all.name + "-test")};
}

MembershipMetrics membershipMetrics(const ConfusionCounts& counts) {
    MembershipMetrics m;
    m.counts = counts;
    const std::size_t total =
        counts.truePositive + counts.falsePositive + counts.trueNegative + counts.falseNegative;
    m.accuracy = ratio(counts.truePositive + counts.trueNegative, total);
    m.precision = ratio(counts.truePositive, counts.truePositive + counts.falsePositive);
    m.recall = ratio(counts.truePositive, counts.truePositive + counts.falseNegative);
    m.f1 = m.precision + m.recall > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

MembershipExperiment runMembershipExperiment(const ExperimentConfig& config) {
    config.validate();
    const Dataset data = loadDataset(config.dataset);
    MembershipExperiment experiment;
    ConfusionCounts counts;
    std::vector<double> scoreM, scoreN, energyM, energyN, chaosM, chaosN;
    for (std::size_t rep = 0; rep < config.repetitions; ++rep) {
        const std::size_t fraction = rep % kFractionCount;
        const auto sets =
            pairedTrainSets(data, fraction, Rng::derive(config.seed, kSplitStream + rep));
        TrainConfig training = config.model.training;
        training.seed = Rng::derive(config.seed, kTrainStream + rep);
        Model with = buildModel(config.model, data.sampleShape(), data.classCount,
                                Rng::derive(config.seed, kModelStream + rep));
        Model without = with;
        train(with, sets.withFraction, training);
        train(without, sets.withoutFraction, training);

        MembershipConfig audit = config.membership;
        audit.seed = Rng::derive(config.seed, kAuditStream + rep);
        const auto placements = resolvePlacements(config.lora, with);
        MembershipRun run;
        run.repetition = rep;
        run.fractionIndex = fraction;
        run.member = auditMembership(with, placements, sets.held.images, sets.held.labels, audit);
        run.nonMember =
            auditMembership(without, placements, sets.held.images, sets.held.labels, audit);

        if (run.member.decision == Decision::member) {
            ++counts.truePositive;
        } else {
            ++counts.falseNegative;
        }
        if (run.nonMember.decision == Decision::member) {
            ++counts.falsePositive;
        } else {
            ++counts.trueNegative;
        }
        scoreM.push_back(run.member.score);
        scoreN.push_back(run.nonMember.score);
        energyM.push_back(run.member.embedding.energy);
        energyN.push_back(run.nonMember.embedding.energy);
        chaosM.push_back(run.member.embedding.chaos);
        chaosN.push_back(run.nonMember.embedding.chaos);
        experiment.runs.push_back(std::move(run));
    }
    experiment.metrics = membershipMetrics(counts);
    experiment.meanScoreMember = mean(scoreM);
    experiment.meanScoreNonMember = mean(scoreN);
    experiment.medianEnergyMember = median(energyM);
    experiment.medianEnergyNonMember = median(energyN);
    experiment.medianChaosMember = median(chaosM);
    experiment.medianChaosNonMember = median(chaosN);
    return experiment;
}

BackdoorSeeds backdoorSeeds(std::uint64_t seed, int target) {
    const auto t = static_cast<std::uint64_t>(target);
    return {Rng::derive(seed, 1), Rng::derive(seed, 2), Rng::derive(seed, 16 + t),
            Rng::derive(seed, 64 + t)};
}

BackdoorExperiment runBackdoorExperiment(const ExperimentConfig& config, const DataSplit& split,
                                         TriggerKind trigger, double rate) {
    config.validate();
    BackdoorExperiment experiment;
    experiment.trigger = trigger;
    experiment.rate = rate;

    std::vector<int> targets = config.attack.targets;
    if (targets.empty()) {
        targets.resize(split.train.classCount);
        std::iota(targets.begin(), targets.end(), 0);
    }
    const BackdoorSeeds shared = backdoorSeeds(config.seed, 0);
    TrainConfig training = config.model.training;
    training.seed = shared.training;
    {
        Model twin = buildModel(config.model, split.train.sampleShape(), split.train.classCount,
                                shared.model);
        train(twin, split.train, training);
        experiment.cleanTwinAccuracy = accuracy(twin, split.test);
    }

    std::size_t hits1 = 0, hits3 = 0, trialHits1 = 0, trialHits3 = 0, trialCount = 0;
    std::vector<double> asr, clean;
    for (int target : targets) {
        const BackdoorSeeds seeds = backdoorSeeds(config.seed, target);
        const PoisonSpec spec =
            makePoisonSpec(trigger, split.train.sampleShape(), target, rate, seeds.poison);
        const PoisonedDataset poisoned = poisonDataset(split.train, spec);
        Model model = buildModel(config.model, split.train.sampleShape(), split.train.classCount,
                                 shared.model);
        train(model, poisoned.data, training);

        BackdoorConfig audit = config.backdoor;
        audit.seed = seeds.audit;
        const auto placements = resolvePlacements(config.lora, model);
        BackdoorRun run;
        run.target = target;
        run.attackSuccessRate = attackSuccessRate(model, split.test, spec);
        run.cleanAccuracy = accuracy(model, split.test);
        run.verdict = auditBackdoor(model, placements, audit);
        run.top1Hit = run.verdict.top1Hit(target);
        run.top3Hit = run.verdict.top3Hit(target);
        hits1 += run.top1Hit;
        hits3 += run.top3Hit;
        for (const auto& r : run.verdict.rankings) {
            const std::size_t rank = r.rankOf(target);
            trialHits1 += rank == 1;
            trialHits3 += rank <= 3;
            ++trialCount;
        }
        asr.push_back(run.attackSuccessRate);
        clean.push_back(run.cleanAccuracy);
        experiment.runs.push_back(std::move(run));
    }
    experiment.top1Rate = ratio(hits1, targets.size());
    experiment.top3Rate = ratio(hits3, targets.size());
    experiment.trialTop1Rate = ratio(trialHits1, trialCount);
    experiment.trialTop3Rate = ratio(trialHits3, trialCount);
    experiment.meanAttackSuccess = mean(asr);
    experiment.meanCleanAccuracy = mean(clean);
    return experiment;
}

}  // namespace lora_audit
