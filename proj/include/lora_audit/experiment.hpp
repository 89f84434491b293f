// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lora_audit/attacks.hpp"
#include "lora_audit/backdoor.hpp"
#include "lora_audit/data.hpp"
#include "lora_audit/membership.hpp"
#include "lora_audit/nn.hpp"

namespace lora_audit {

enum class Mode { train, poison, auditMembership, auditBackdoor, sweep };
std::string toString(Mode mode);
Mode modeFromString(const std::string& name);

/// Where samples come from. `synthetic` uses genSynthetic; `idx` reads IDX files.
struct DatasetSpec {
    std::string source = "synthetic";
    std::string imagesPath;
    std::string labelsPath;
    std::size_t classCount = 10;
    std::size_t perClass = 200;
    std::size_t imageSize = 8;
    double noise = 0.45;
    std::uint64_t seed = 7;
    /// Average-pooling factor applied after loading; 1 keeps the original size.
    std::size_t downsample = 1;

    void validate() const;
};

struct ModelSpec {
    /// `mlp` or `cnn`.
    std::string architecture = "mlp";
    std::vector<std::size_t> hidden{64, 32};
    std::size_t conv1Channels = 4;
    std::size_t conv2Channels = 8;
    std::size_t kernel = 3;
    /// Width of the dense block between the convolutions and the classifier.
    std::size_t denseHidden = 32;
    TrainConfig training{0.003, 30, 32, 0, OptimizerKind::adam};
    /// Optional checkpoint to audit instead of training (audit-backdoor only).
    std::string checkpoint;

    void validate() const;
};

/// Adapter placement. Empty `layers` means the last dense layer.
struct LoraSpec {
    std::vector<std::size_t> layers;
};

struct AttackSpec {
    TriggerKind trigger = TriggerKind::patch;
    double rate = 0.2;
    /// Target labels to rotate through; empty means every class.
    std::vector<int> targets;
    std::vector<double> sweepRates{0.01, 0.05, 0.1, 0.2};

    void validate(std::size_t classCount) const;
};

struct ExperimentConfig {
    Mode mode = Mode::auditMembership;
    DatasetSpec dataset;
    /// Held-out evaluation set; when absent a seeded 20% split of `dataset` is used.
    std::optional<DatasetSpec> testDataset;
    ModelSpec model;
    LoraSpec lora;
    MembershipConfig membership;
    BackdoorConfig backdoor;
    AttackSpec attack;
    /// Paired membership repetitions.
    std::size_t repetitions = 20;
    std::string outputDir;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);
void to_json(nlohmann::json& j, const LoraSpec& s);
void from_json(const nlohmann::json& j, LoraSpec& s);
void to_json(nlohmann::json& j, const AttackSpec& s);
void from_json(const nlohmann::json& j, AttackSpec& s);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Sets `dotted.key.path` to `value`, parsed as JSON when possible and as a plain string
/// otherwise. Intermediate objects are created as needed.
void applyOverride(nlohmann::json& config, const std::string& assignment);

Dataset loadDataset(const DatasetSpec& spec);
Model buildModel(const ModelSpec& spec, const Shape& sampleShape, std::size_t classCount,
                 std::uint64_t seed);
std::vector<LoraPlacement> resolvePlacements(const LoraSpec& spec, const Model& model);

/// Train/test pair used by the backdoor pipelines.
struct DataSplit {
    Dataset train;
    Dataset test;
};
DataSplit loadSplit(const ExperimentConfig& config);

struct ConfusionCounts {
    std::size_t truePositive = 0;
    std::size_t falsePositive = 0;
    std::size_t trueNegative = 0;
    std::size_t falseNegative = 0;
};

/// Binary metrics with "member" as the positive class. Undefined ratios are reported as 0.
struct MembershipMetrics {
    ConfusionCounts counts;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

MembershipMetrics membershipMetrics(const ConfusionCounts& counts);

struct MembershipRun {
    std::size_t repetition = 0;
    std::size_t fractionIndex = 0;
    MembershipVerdict member;     // audit of the model trained with the fraction
    MembershipVerdict nonMember;  // audit of the model trained without it
};

struct MembershipExperiment {
    std::vector<MembershipRun> runs;
    MembershipMetrics metrics;
    double meanScoreMember = 0.0;
    double meanScoreNonMember = 0.0;
    double medianEnergyMember = 0.0;
    double medianEnergyNonMember = 0.0;
    double medianChaosMember = 0.0;
    double medianChaosNonMember = 0.0;
};

/// Paired protocol: for each repetition, two identically seeded models are trained with
/// and without one held tenth of the data, and that tenth is audited against both.
MembershipExperiment runMembershipExperiment(const ExperimentConfig& config);

struct BackdoorRun {
    int target = 0;
    double attackSuccessRate = 0.0;
    double cleanAccuracy = 0.0;
    BackdoorVerdict verdict;
    bool top1Hit = false;
    bool top3Hit = false;
};

struct BackdoorExperiment {
    TriggerKind trigger = TriggerKind::patch;
    double rate = 0.0;
    /// Accuracy of the unpoisoned twin on the clean test set.
    double cleanTwinAccuracy = 0.0;
    std::vector<BackdoorRun> runs;
    double top1Rate = 0.0;
    double top3Rate = 0.0;
    /// Per-trial hit rates, pooled over every trial of every run.
    double trialTop1Rate = 0.0;
    double trialTop3Rate = 0.0;
    double meanAttackSuccess = 0.0;
    double meanCleanAccuracy = 0.0;
};

/// Trains one poisoned model per target and audits it. The clean twin shares the
/// initialization and shuffling seeds.
BackdoorExperiment runBackdoorExperiment(const ExperimentConfig& config, const DataSplit& split,
                                         TriggerKind trigger, double rate);

/// Seeds shared by the backdoor pipeline, exposed so tests can rebuild its models.
struct BackdoorSeeds {
    std::uint64_t model = 0;
    std::uint64_t training = 0;
    std::uint64_t poison = 0;
    std::uint64_t audit = 0;
};
BackdoorSeeds backdoorSeeds(std::uint64_t seed, int target);

struct SeriesPoint {
    std::string series;
    std::optional<double> rate;
    std::string metric;
    double value = 0.0;

    bool operator==(const SeriesPoint&) const = default;
};

inline constexpr int kSchemaVersion = 1;

struct Report {
    int schemaVersion = kSchemaVersion;
    Mode mode = Mode::auditMembership;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json verdicts = nlohmann::json::array();
    nlohmann::json metrics = nlohmann::json::object();
    std::vector<SeriesPoint> series;

    bool operator==(const Report&) const = default;
};

/// Rounds every floating-point number in the tree to 6 significant digits.
nlohmann::json roundNumbers(const nlohmann::json& value);

void to_json(nlohmann::json& j, const SeriesPoint& p);
void from_json(const nlohmann::json& j, SeriesPoint& p);
void to_json(nlohmann::json& j, const Report& r);
void from_json(const nlohmann::json& j, Report& r);

void to_json(nlohmann::json& j, const MembershipRun& r);
void to_json(nlohmann::json& j, const BackdoorRun& r);

Report membershipReport(const ExperimentConfig& config, const MembershipExperiment& experiment);
Report backdoorReport(const ExperimentConfig& config,
                      const std::vector<BackdoorExperiment>& experiments);

std::string reportJson(const Report& report);
/// Header `schemaVersion,series,rate,metric,value`, then one row per series point.
std::string reportCsv(const Report& report);

struct ReportFiles {
    std::filesystem::path json;
    std::filesystem::path csv;
};

/// Writes `<stem>.json` and `<stem>.csv` into `directory`, creating it if needed.
ReportFiles emitReport(const Report& report, const std::filesystem::path& directory,
                       const std::string& stem);

}  // namespace lora_audit
