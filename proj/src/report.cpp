// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "lora_audit/errors.hpp"
#include "lora_audit/experiment.hpp"

namespace lora_audit {

namespace {

double round6(double x) {
    if (!std::isfinite(x) || x == 0.0) return x;
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.6g", x);
    return std::strtod(buffer, nullptr);
}

std::string formatNumber(double x) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.6g", x);
    return buffer;
}

nlohmann::json metricsJson(const MembershipMetrics& m) {
    return {{"accuracy", m.accuracy},
            {"precision", m.precision},
            {"recall", m.recall},
            {"f1", m.f1},
            {"truePositive", m.counts.truePositive},
            {"falsePositive", m.counts.falsePositive},
            {"trueNegative", m.counts.trueNegative},
            {"falseNegative", m.counts.falseNegative}};
}

std::string seriesName(const BackdoorExperiment& e) { return toString(e.trigger); }

}  // namespace

nlohmann::json roundNumbers(const nlohmann::json& value) {
    if (value.is_number_float()) return round6(value.get<double>());
    if (value.is_array() || value.is_object()) {
        nlohmann::json out = value;
        for (auto& item : out) item = roundNumbers(item);
        return out;
    }
    return value;
}

void to_json(nlohmann::json& j, const SeriesPoint& p) {
    j = {{"series", p.series},
         {"rate", p.rate ? nlohmann::json(*p.rate) : nlohmann::json()},
         {"metric", p.metric},
         {"value", p.value}};
}

void from_json(const nlohmann::json& j, SeriesPoint& p) {
    p.series = j.at("series").get<std::string>();
    const auto& rate = j.at("rate");
    if (rate.is_null()) {
        p.rate.reset();
    } else {
        p.rate = rate.get<double>();
    }
    p.metric = j.at("metric").get<std::string>();
    p.value = j.at("value").get<double>();
}

void to_json(nlohmann::json& j, const Report& r) {
    j = {{"schemaVersion", r.schemaVersion},
         {"mode", toString(r.mode)},
         {"config", r.config},
         {"verdicts", r.verdicts},
         {"metrics", r.metrics},
         {"series", r.series}};
}

void from_json(const nlohmann::json& j, Report& r) {
    r.schemaVersion = j.at("schemaVersion").get<int>();
    if (r.schemaVersion > kSchemaVersion) {
        throw FormatError("report schema version " + std::to_string(r.schemaVersion) +
                          " is newer than supported version " + std::to_string(kSchemaVersion));
    }
    r.mode = modeFromString(j.at("mode").get<std::string>());
    r.config = j.at("config");
    r.verdicts = j.at("verdicts");
    r.metrics = j.at("metrics");
    r.series = j.at("series").get<std::vector<SeriesPoint>>();
}

void to_json(nlohmann::json& j, const MembershipRun& r) {
    j = {{"repetition", r.repetition},
         {"fractionIndex", r.fractionIndex},
         {"member", r.member},
         {"nonMember", r.nonMember}};
}

void to_json(nlohmann::json& j, const BackdoorRun& r) {
    j = {{"target", r.target},
         {"attackSuccessRate", r.attackSuccessRate},
         {"cleanAccuracy", r.cleanAccuracy},
         {"top1Hit", r.top1Hit},
         {"top3Hit", r.top3Hit},
         {"verdict", r.verdict}};
}

Report membershipReport(const ExperimentConfig& config, const MembershipExperiment& experiment) {
    Report report;
    report.mode = Mode::auditMembership;
    report.config = roundNumbers(nlohmann::json(config));
    for (const auto& run : experiment.runs) report.verdicts.push_back(roundNumbers(run));
    nlohmann::json metrics = metricsJson(experiment.metrics);
    metrics["meanScoreMember"] = experiment.meanScoreMember;
    metrics["meanScoreNonMember"] = experiment.meanScoreNonMember;
    metrics["medianEnergyMember"] = experiment.medianEnergyMember;
    metrics["medianEnergyNonMember"] = experiment.medianEnergyNonMember;
    metrics["medianChaosMember"] = experiment.medianChaosMember;
    metrics["medianChaosNonMember"] = experiment.medianChaosNonMember;
    report.metrics = roundNumbers(metrics);
    const std::string name = config.dataset.source;
    for (const auto& [metric, value] :
         {std::pair<const char*, double>{"accuracy", experiment.metrics.accuracy},
          {"precision", experiment.metrics.precision},
          {"recall", experiment.metrics.recall},
          {"f1", experiment.metrics.f1}}) {
        report.series.push_back({name, std::nullopt, metric, round6(value)});
    }
    return report;
}

Report backdoorReport(const ExperimentConfig& config,
                      const std::vector<BackdoorExperiment>& experiments) {
    Report report;
    report.mode = config.mode;
    report.config = roundNumbers(nlohmann::json(config));
    nlohmann::json table = nlohmann::json::array();
    for (const auto& e : experiments) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& run : e.runs) runs.push_back(run);
        report.verdicts.push_back(roundNumbers(nlohmann::json{
            {"trigger", toString(e.trigger)}, {"rate", e.rate}, {"runs", std::move(runs)}}));
        table.push_back({{"trigger", toString(e.trigger)},
                         {"rate", e.rate},
                         {"top1", e.top1Rate},
                         {"top3", e.top3Rate},
                         {"trialTop1", e.trialTop1Rate},
                         {"trialTop3", e.trialTop3Rate},
                         {"attackSuccessRate", e.meanAttackSuccess},
                         {"cleanAccuracy", e.meanCleanAccuracy},
                         {"cleanTwinAccuracy", e.cleanTwinAccuracy}});
        for (const auto& [metric, value] :
             {std::pair<const char*, double>{"top1", e.top1Rate},
              {"top3", e.top3Rate},
              {"asr", e.meanAttackSuccess}}) {
            report.series.push_back({seriesName(e), round6(e.rate), metric, round6(value)});
        }
    }
    report.metrics = roundNumbers(nlohmann::json{{"table", std::move(table)}});
    return report;
}

std::string reportJson(const Report& report) { return nlohmann::json(report).dump(2) + "\n"; }

std::string reportCsv(const Report& report) {
    std::ostringstream out;
    out << "schemaVersion,series,rate,metric,value\n";
    for (const auto& p : report.series) {
        out << report.schemaVersion << ',' << p.series << ','
            << (p.rate ? formatNumber(*p.rate) : std::string()) << ',' << p.metric << ','
            << formatNumber(p.value) << '\n';
    }
    return out.str();
}

ReportFiles emitReport(const Report& report, const std::filesystem::path& directory,
                       const std::string& stem) {
    std::error_code ec;
    std::filesystem::create_directories(directory, ec);
    if (ec) throw IoError("cannot create output directory " + directory.string() + ": " + ec.message());
    ReportFiles files{directory / (stem + ".json"), directory / (stem + ".csv")};
    for (const auto& [path, text] :
         {std::pair{files.json, reportJson(report)}, std::pair{files.csv, reportCsv(report)}}) {
        std::ofstream file(path, std::ios::binary);
        if (!file) throw IoError("cannot write " + path.string());
        file << text;
        if (!file) throw IoError("write failed for " + path.string());
    }
    return files;
}

}  // namespace lora_audit
