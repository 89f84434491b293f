// SPDX-License-Identifier: Apache-2.0
#include "lora_audit/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "lora_audit/errors.hpp"
#include "lora_audit/experiment.hpp"

namespace lora_audit {

namespace {

struct Options {
    std::string configPath;
    std::vector<std::string> overrides;
    std::string outDir;
    bool poisoned = false;
};

nlohmann::json readJsonFile(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw IoError("cannot open config " + path);
    nlohmann::json j = nlohmann::json::parse(file, nullptr, false);
    if (j.is_discarded()) throw FormatError("config " + path + " is not valid JSON");
    return j;
}

ExperimentConfig resolveConfig(const Options& options, Mode mode) {
    nlohmann::json j = options.configPath.empty() ? nlohmann::json::object()
                                                  : readJsonFile(options.configPath);
    for (const auto& o : options.overrides) applyOverride(j, o);
    j["mode"] = toString(mode);
    ExperimentConfig config = j.get<ExperimentConfig>();
    config.validate();
    return config;
}

std::filesystem::path outputDirectory(const Options& options, const ExperimentConfig& config) {
    if (!options.outDir.empty()) return options.outDir;
    if (!config.outputDir.empty()) return config.outputDir;
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
    return "lora_audit_out";
}

int target(const ExperimentConfig& config) {
    return config.attack.targets.empty() ? 0 : config.attack.targets.front();
}

void runTrain(const ExperimentConfig& config, const Options& options, std::ostream& out) {
    const DataSplit split = loadSplit(config);
    Dataset trainSet = split.train;
    std::optional<PoisonSpec> spec;
    const BackdoorSeeds seeds = backdoorSeeds(config.seed, target(config));
    if (options.poisoned) {
        spec = makePoisonSpec(config.attack.trigger, trainSet.sampleShape(), target(config),
                              config.attack.rate, seeds.poison);
        trainSet = poisonDataset(trainSet, *spec).data;
    }
    Model model = buildModel(config.model, trainSet.sampleShape(), trainSet.classCount, seeds.model);
    TrainConfig training = config.model.training;
    training.seed = seeds.training;
    const auto losses = train(model, trainSet, training);

    const auto dir = outputDirectory(options, config);
    std::filesystem::create_directories(dir);
    saveCheckpoint(model, dir / "model.ckpt");

    Report report;
    report.mode = Mode::train;
    report.config = roundNumbers(nlohmann::json(config));
    nlohmann::json verdict = {{"checkpoint", "model.ckpt"},
                              {"losses", losses},
                              {"testAccuracy", accuracy(model, split.test)},
                              {"poisoned", options.poisoned}};
    if (spec) verdict["attackSuccessRate"] = attackSuccessRate(model, split.test, *spec);
    report.verdicts.push_back(roundNumbers(verdict));
    report.metrics = roundNumbers(nlohmann::json{{"testAccuracy", verdict["testAccuracy"]}});
    for (std::size_t e = 0; e < losses.size(); ++e) {
        report.series.push_back({"loss", std::nullopt, "epoch" + std::to_string(e + 1),
                                 roundNumbers(losses[e]).get<double>()});
    }
    const auto files = emitReport(report, dir, "train");
    out << "wrote " << (dir / "model.ckpt").string() << " and " << files.json.string() << "\n";
}

void runPoison(const ExperimentConfig& config, const Options& options, std::ostream& out) {
    const DataSplit split = loadSplit(config);
    const BackdoorSeeds seeds = backdoorSeeds(config.seed, target(config));
    const PoisonSpec spec = makePoisonSpec(config.attack.trigger, split.train.sampleShape(),
                                           target(config), config.attack.rate, seeds.poison);
    const PoisonedDataset poisoned = poisonDataset(split.train, spec);
    const auto dir = outputDirectory(options, config);
    std::filesystem::create_directories(dir);
    writeIdx(poisoned.data, dir / "poisoned-images-idx3-ubyte", dir / "poisoned-labels-idx1-ubyte");

    DatasetManifest manifest{poisoned.data.name,
                             {"poisoned-images-idx3-ubyte", "poisoned-labels-idx1-ubyte"},
                             seeds.poison,
                             poisoned.data.count(),
                             poisoned.poisonedIndices};
    Report report;
    report.mode = Mode::poison;
    report.config = roundNumbers(nlohmann::json(config));
    report.verdicts.push_back(roundNumbers(nlohmann::json{{"spec", spec}, {"manifest", manifest}}));
    report.metrics = {{"poisonedCount", poisoned.poisonedIndices.size()},
                      {"count", poisoned.data.count()}};
    report.series.push_back({toString(spec.kind), roundNumbers(spec.rate).get<double>(),
                             "poisonedCount",
                             static_cast<double>(poisoned.poisonedIndices.size())});
    const auto files = emitReport(report, dir, "poison");
    out << "wrote poisoned dataset and " << files.json.string() << "\n";
}

void runMembership(const ExperimentConfig& config, const Options& options, std::ostream& out) {
    const MembershipExperiment experiment = runMembershipExperiment(config);
    const auto files =
        emitReport(membershipReport(config, experiment), outputDirectory(options, config),
                   "audit-membership");
    out << "accuracy " << experiment.metrics.accuracy << ", precision "
        << experiment.metrics.precision << ", recall " << experiment.metrics.recall << ", F1 "
        << experiment.metrics.f1 << "\nwrote " << files.json.string() << "\n";
}

void runCheckpointAudit(const ExperimentConfig& config, const Options& options,
                        std::ostream& out) {
    const Model model = loadCheckpoint(config.model.checkpoint);
    const auto placements = resolvePlacements(config.lora, model);
    const BackdoorVerdict verdict = auditBackdoor(model, placements, config.backdoor);
    Report report;
    report.mode = Mode::auditBackdoor;
    report.config = roundNumbers(nlohmann::json(config));
    report.verdicts.push_back(roundNumbers(nlohmann::json(verdict)));
    report.metrics = {{"top1", verdict.top1},
                      {"top3", verdict.top3},
                      {"flagged", verdict.flagged ? nlohmann::json(*verdict.flagged)
                                                  : nlohmann::json()}};
    const auto files =
        emitReport(report, outputDirectory(options, config), "audit-backdoor");
    out << "top1 " << verdict.top1 << "\nwrote " << files.json.string() << "\n";
}

void runBackdoor(const ExperimentConfig& config, const Options& options, std::ostream& out) {
    if (!config.model.checkpoint.empty()) {
        runCheckpointAudit(config, options, out);
        return;
    }
    const DataSplit split = loadSplit(config);
    std::vector<BackdoorExperiment> experiments;
    if (config.mode == Mode::sweep) {
        for (double rate : config.attack.sweepRates) {
            experiments.push_back(runBackdoorExperiment(config, split, config.attack.trigger, rate));
            out << "rate " << rate << ": top1 " << experiments.back().top1Rate << ", top3 "
                << experiments.back().top3Rate << "\n";
        }
    } else {
        experiments.push_back(
            runBackdoorExperiment(config, split, config.attack.trigger, config.attack.rate));
        out << "top1 " << experiments.back().top1Rate << ", top3 " << experiments.back().top3Rate
            << ", ASR " << experiments.back().meanAttackSuccess << "\n";
    }
    const auto files = emitReport(backdoorReport(config, experiments),
                                  outputDirectory(options, config), toString(config.mode));
    out << "wrote " << files.json.string() << "\n";
}

}  // namespace

int runCommand(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"LoRA-based membership and backdoor auditing", "lora_audit"};
    app.require_subcommand(1);
    Options options;
    struct Command {
        Mode mode;
        const char* description;
        CLI::App* app = nullptr;
    };
    std::vector<Command> commands = {
        {Mode::train, "Pretrain a model, optionally on poisoned data"},
        {Mode::poison, "Materialize a poisoned training set"},
        {Mode::auditMembership, "Paired-protocol membership evaluation"},
        {Mode::auditBackdoor, "Backdoor target detection over trials"},
        {Mode::sweep, "Backdoor detection across poison rates"}};
    for (auto& c : commands) {
        c.app = app.add_subcommand(toString(c.mode), c.description);
        c.app->add_option("-c,--config", options.configPath, "JSON config file")
            ->check(CLI::ExistingFile);
        c.app->add_option("--set", options.overrides, "Override a config value: key.path=value");
        c.app->add_option("-o,--out", options.outDir,
                          std::string("Output directory (default: $") + kOutputDirEnv + ")");
        if (c.mode == Mode::train) {
            c.app->add_flag("--poisoned", options.poisoned, "Train on the poisoned dataset");
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        for (const auto& c : commands) {
            if (!c.app->parsed()) continue;
            const ExperimentConfig config = resolveConfig(options, c.mode);
            switch (c.mode) {
                case Mode::train: runTrain(config, options, out); break;
                case Mode::poison: runPoison(config, options, out); break;
                case Mode::auditMembership: runMembership(config, options, out); break;
                case Mode::auditBackdoor:
                case Mode::sweep: runBackdoor(config, options, out); break;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed config: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace lora_audit
