// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lora_audit/cli.hpp"
#include "lora_audit/errors.hpp"
#include "lora_audit/experiment.hpp"

using namespace lora_audit;
namespace fs = std::filesystem;

namespace {

nlohmann::json tinyConfig() {
    return nlohmann::json::parse(R"({
      "dataset": {"source": "synthetic", "classCount": 4, "perClass": 20, "imageSize": 6,
                  "noise": 0.3, "seed": 3},
      "model": {"architecture": "mlp", "hidden": [8],
                "training": {"learningRate": 0.01, "epochs": 3, "batchSize": 16,
                             "optimizer": "adam"}},
      "membership": {"epochs": 3},
      "backdoor": {"trials": 1, "rank": 2, "synthesis": {"steps": 2, "batchSize": 4},
                   "signatureTraining": {"epochs": 1}},
      "attack": {"targets": [0, 1], "sweepRates": [0.1, 0.2]},
      "repetitions": 2,
      "seed": 5
    })");
}

ExperimentConfig tinyExperiment(Mode mode) {
    nlohmann::json j = tinyConfig();
    j["mode"] = toString(mode);
    return j.get<ExperimentConfig>();
}

fs::path scratchDir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("lora_audit_test_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run(std::vector<std::string> args, std::string* errText = nullptr) {
    std::ostringstream out, err;
    const int code = runCommand(args, out, err);
    if (errText) *errText = err.str();
    return code;
}

fs::path writeConfig(const fs::path& dir, const nlohmann::json& j) {
    fs::create_directories(dir);
    const fs::path path = dir / "config.json";
    std::ofstream(path) << j.dump(2);
    return path;
}

}  // namespace

TEST_CASE("overrides set nested values") {
    nlohmann::json j = tinyConfig();
    applyOverride(j, "backdoor.synthesis.steps=17");
    applyOverride(j, "attack.trigger=blend");
    applyOverride(j, "attack.sweepRates=[0.01,0.2]");
    applyOverride(j, "model.training.optimizer=sgd");
    applyOverride(j, "lora.layers=[1]");
    CHECK(j["backdoor"]["synthesis"]["steps"] == 17);
    CHECK(j["attack"]["trigger"] == "blend");
    const auto c = j.get<ExperimentConfig>();
    CHECK(c.backdoor.synthesis.steps == 17);
    CHECK((c.attack.trigger == TriggerKind::blend));
    CHECK(c.attack.sweepRates == std::vector<double>{0.01, 0.2});
    CHECK((c.model.training.optimizer == OptimizerKind::sgd));
    CHECK(c.lora.layers == std::vector<std::size_t>{1});
    CHECK_THROWS_AS(applyOverride(j, "noequals"), ValidationError);
    CHECK_THROWS_AS(applyOverride(j, "seed.inner=1"), ValidationError);
}

TEST_CASE("config JSON round trip and validation") {
    const ExperimentConfig c = tinyExperiment(Mode::sweep);
    const ExperimentConfig back = nlohmann::json(c).get<ExperimentConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
    nlohmann::json bad = tinyConfig();
    bad["dataset"]["colour"] = 1;
    CHECK_THROWS_AS(bad.get<ExperimentConfig>(), ValidationError);
    nlohmann::json badRate = tinyConfig();
    badRate["attack"]["rate"] = 2.0;
    CHECK_THROWS_AS(badRate.get<ExperimentConfig>().validate(), ValidationError);
}

TEST_CASE("membership metrics arithmetic") {
    const auto m = membershipMetrics({8, 2, 6, 4});
    CHECK(m.accuracy == doctest::Approx(0.7));
    CHECK(m.precision == doctest::Approx(0.8));
    CHECK(m.recall == doctest::Approx(8.0 / 12.0));
    CHECK(m.f1 == doctest::Approx(2 * 0.8 * (8.0 / 12.0) / (0.8 + 8.0 / 12.0)));
    const auto empty = membershipMetrics({});
    CHECK(empty.accuracy == 0.0);
    CHECK(empty.f1 == 0.0);
}

TEST_CASE("placements default to the last dense layer") {
    const Model m = makeMlp({1, 4, 4}, std::vector<std::size_t>{5, 3}, 2, 1);
    CHECK(resolvePlacements({}, m).front().layerIndex == m.layers.size() - 1);
    CHECK_THROWS_AS(resolvePlacements(LoraSpec{{0}}, m), PlacementError);
}

TEST_CASE("membership report has the metric columns") {
    const ExperimentConfig c = tinyExperiment(Mode::auditMembership);
    const auto experiment = runMembershipExperiment(c);
    CHECK(experiment.runs.size() == 2);
    const Report r = membershipReport(c, experiment);
    for (const char* key : {"accuracy", "precision", "recall", "f1"}) {
        CHECK(r.metrics.contains(key));
    }
    CHECK(r.series.size() == 4);
    CHECK(r.verdicts.size() == 2);
}

TEST_CASE("sweep report has one top-1 and one top-3 point per rate") {
    const ExperimentConfig c = tinyExperiment(Mode::sweep);
    const DataSplit split = loadSplit(c);
    CHECK(split.test.count() == 16);
    std::vector<BackdoorExperiment> experiments;
    for (double rate : c.attack.sweepRates) {
        experiments.push_back(runBackdoorExperiment(c, split, c.attack.trigger, rate));
    }
    const Report r = backdoorReport(c, experiments);
    for (double rate : c.attack.sweepRates) {
        for (const char* metric : {"top1", "top3"}) {
            const auto n = std::count_if(r.series.begin(), r.series.end(), [&](const SeriesPoint& p) {
                return p.rate && *p.rate == rate && p.metric == metric;
            });
            CHECK(n == 1);
        }
    }
    for (const auto& e : experiments) {
        CHECK(e.runs.size() == 2);
        for (const auto& run : e.runs) CHECK((!run.top1Hit || run.top3Hit));
    }
}

TEST_CASE("report serialization contracts") {
    SUBCASE("empty report is valid JSON with no verdicts") {
        const Report empty;
        const auto j = nlohmann::json::parse(reportJson(empty));
        CHECK(j["verdicts"].is_array());
        CHECK(j["verdicts"].empty());
        CHECK(j["schemaVersion"] == kSchemaVersion);
        CHECK(reportCsv(empty) == "schemaVersion,series,rate,metric,value\n");
    }
    SUBCASE("CSV has one row per series point and JSON round-trips") {
        const ExperimentConfig c = tinyExperiment(Mode::auditMembership);
        Report r = membershipReport(c, runMembershipExperiment(c));
        r.series.push_back({"patch", 0.05, "top3", 0.333333});
        const std::string csv = reportCsv(r);
        CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) ==
              r.series.size() + 1);
        const Report back = nlohmann::json::parse(reportJson(r)).get<Report>();
        CHECK(back == r);
    }
    SUBCASE("numbers carry six significant digits") {
        CHECK(roundNumbers(nlohmann::json(0.123456789)).get<double>() == 0.123457);
        CHECK(roundNumbers(nlohmann::json{{"a", {1.0 / 3.0}}})["a"][0].get<double>() == 0.333333);
        CHECK(roundNumbers(nlohmann::json(12)).is_number_integer());
    }
    SUBCASE("newer schema versions are refused") {
        nlohmann::json j = Report{};
        j["schemaVersion"] = kSchemaVersion + 1;
        CHECK_THROWS_AS(j.get<Report>(), FormatError);
    }
}

TEST_CASE("command line runs are byte-identical") {
    const fs::path dir = scratchDir("cli_repeat");
    const fs::path config = writeConfig(dir, tinyConfig());
    for (const std::string sub : {"audit-membership", "sweep", "poison", "train"}) {
        std::vector<std::string> args{sub, "--config", config.string(), "--out",
                                      (dir / "a").string()};
        REQUIRE(run(args) == 0);
        args.back() = (dir / "b").string();
        REQUIRE(run(args) == 0);
        CHECK(slurp(dir / "a" / (sub + ".json")) == slurp(dir / "b" / (sub + ".json")));
        CHECK(slurp(dir / "a" / (sub + ".csv")) == slurp(dir / "b" / (sub + ".csv")));
        CHECK(!slurp(dir / "a" / (sub + ".json")).empty());
    }
    CHECK(fs::exists(dir / "a" / "model.ckpt"));
    CHECK(fs::exists(dir / "a" / "poisoned-images-idx3-ubyte"));

    // Auditing the saved checkpoint directly.
    std::vector<std::string> args{"audit-backdoor", "--config", config.string(), "--set",
                                  "model.checkpoint=" + (dir / "a" / "model.ckpt").string(),
                                  "--out", (dir / "c").string()};
    CHECK(run(args) == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "c" / "audit-backdoor.json"));
    CHECK(report["verdicts"][0].contains("top1"));
    fs::remove_all(dir);
}

TEST_CASE("output directory comes from the environment by default") {
    const fs::path dir = scratchDir("cli_env");
    const fs::path config = writeConfig(dir, tinyConfig());
    ::setenv(kOutputDirEnv, (dir / "env").string().c_str(), 1);
    CHECK(run({"poison", "--config", config.string()}) == 0);
    ::unsetenv(kOutputDirEnv);
    CHECK(fs::exists(dir / "env" / "poison.json"));
    CHECK(fs::exists(dir / "env" / "poison.csv"));
    fs::remove_all(dir);
}

TEST_CASE("command line errors exit nonzero with a message") {
    const fs::path dir = scratchDir("cli_errors");
    std::string err;
    CHECK(run({"frobnicate"}, &err) != 0);
    CHECK(!err.empty());
    CHECK(run({}, &err) != 0);
    CHECK(run({"sweep", "--config", (dir / "missing.json").string()}, &err) != 0);
    CHECK(!err.empty());

    fs::create_directories(dir);
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK(run({"sweep", "--config", (dir / "broken.json").string()}, &err) != 0);
    CHECK(err.find("error") != std::string::npos);

    const fs::path config = writeConfig(dir, tinyConfig());
    CHECK(run({"sweep", "--config", config.string(), "--set", "dataset.source=nowhere"}, &err) != 0);
    CHECK(run({"audit-membership", "--config", config.string(), "--set", "membership.beta1=-1"},
              &err) != 0);
    CHECK(err.find("beta1") != std::string::npos);
    fs::remove_all(dir);
}
