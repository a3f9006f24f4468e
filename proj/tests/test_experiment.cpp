#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "cglearn/experiment.hpp"

using namespace cglearn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("cglearn_experiment_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    return lines;
}

ExperimentConfig tiny_demo_config() {
    ExperimentConfig config;
    config.scenario = Scenario::TwoFeatureDemo;
    config.methods = {Method::Erm, Method::CgLearn};
    config.trials = 3;
    config.seed = 9;
    config.demo_samples = 400;
    config.train_steps = 300;
    config.quiet = true;
    return config;
}

int run_cli(const std::string& args) {
    const std::string command =
        std::string(CGLEARN_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("scenario and method names round trip") {
    for (const std::string name : {"linear-multi", "linear-single", "real-regression",
                                   "real-classification", "demo", "gradcheck"}) {
        CHECK(scenario_name(scenario_from_name(name)) == name);
    }
    CHECK_THROWS_AS(scenario_from_name("bogus"), ConfigError);

    const auto methods = methods_from_string(" erm, cglearn ,irmv1");
    REQUIRE(methods.size() == 3);
    CHECK(methods[0] == Method::Erm);
    CHECK(methods[1] == Method::CgLearn);
    CHECK(methods[2] == Method::Irmv1);
    CHECK_THROWS_AS(methods_from_string("erm,bogus"), ConfigError);
    CHECK_THROWS_AS(methods_from_string(" , "), ConfigError);
}

TEST_CASE("config file loading") {
    TempDir dir;

    SUBCASE("all keys land in the right fields") {
        write_file(dir.path / "config.json", R"({
            "scenario": "linear-single",
            "methods": ["erm", "cglearn"],
            "trials": 7,
            "seed": 11,
            "threshold": 4.0,
            "batches": [3],
            "cases": ["FOU"],
            "dataset": "boston",
            "data_dir": "dd",
            "output": "outdir",
            "jobs": 2,
            "quiet": true,
            "env_values": [0.2, 2.0],
            "n_samples": 120,
            "d_causal": 2,
            "d_effect": 3,
            "single_env_value": 1.5,
            "train_steps": 250,
            "step_scale": 0.5,
            "irm_penalty": 100.0,
            "demo_samples": 300,
            "mlp_hidden": [8, 4],
            "mlp_steps": 60,
            "mlp_learning_rate": 0.1,
            "k_lo": 2,
            "k_hi": 4
        })");
        const ExperimentConfig config = load_experiment_config(dir.path / "config.json");
        CHECK(config.scenario == Scenario::LinearSingleEnv);
        REQUIRE(config.methods.size() == 2);
        CHECK(config.methods[1] == Method::CgLearn);
        CHECK(config.trials == 7);
        CHECK(config.seed == 11);
        REQUIRE(config.threshold.has_value());
        CHECK(*config.threshold == 4.0);
        CHECK(config.batch_counts == std::vector<int>{3});
        CHECK(config.cases == std::vector<std::string>{"FOU"});
        CHECK(config.dataset == "boston");
        CHECK(config.data_dir == fs::path("dd"));
        CHECK(config.output_dir == fs::path("outdir"));
        CHECK(config.jobs == 2);
        CHECK(config.quiet);
        CHECK(config.sem.env_values == std::vector<double>{0.2, 2.0});
        CHECK(config.sem.n_samples == 120);
        CHECK(config.sem.d_causal == 2);
        CHECK(config.sem.d_effect == 3);
        CHECK(config.single_env_value == 1.5);
        CHECK(config.train_steps == 250);
        CHECK(config.step_scale == 0.5);
        CHECK(config.irm_penalty == 100.0);
        CHECK(config.demo_samples == 300);
        CHECK(config.mlp_hidden == std::vector<int>{8, 4});
        CHECK(config.mlp_steps == 60);
        CHECK(config.mlp_learning_rate == 0.1);
        CHECK(config.k_range.lo == 2);
        CHECK(config.k_range.hi == 4);
    }

    SUBCASE("methods accept a comma string") {
        write_file(dir.path / "m.json", R"({"methods": "erm,irmv1"})");
        const ExperimentConfig config = load_experiment_config(dir.path / "m.json");
        REQUIRE(config.methods.size() == 2);
        CHECK(config.methods[1] == Method::Irmv1);
    }

    SUBCASE("unknown keys are rejected") {
        write_file(dir.path / "bad.json", R"({"trails": 5})");
        CHECK_THROWS_WITH_AS(load_experiment_config(dir.path / "bad.json"),
                             doctest::Contains("trails"), ConfigError);
    }

    SUBCASE("malformed json is rejected") {
        write_file(dir.path / "broken.json", "{ not json");
        CHECK_THROWS_AS(load_experiment_config(dir.path / "broken.json"), ConfigError);
        CHECK_THROWS_AS(load_experiment_config(dir.path / "missing.json"), ConfigError);
    }

    SUBCASE("wrong value types are config errors") {
        write_file(dir.path / "type.json", R"({"trials": "many"})");
        CHECK_THROWS_AS(load_experiment_config(dir.path / "type.json"), ConfigError);
    }
}

TEST_CASE("config validation") {
    ExperimentConfig config = tiny_demo_config();
    CHECK_NOTHROW(config.validate());

    SUBCASE("trial and job counts") {
        config.trials = -1;
        CHECK_THROWS_AS(config.validate(), ConfigError);
        config.trials = 0;
        config.jobs = -2;
        CHECK_THROWS_AS(config.validate(), ConfigError);
    }
    SUBCASE("methods required") {
        config.methods.clear();
        CHECK_THROWS_AS(config.validate(), ConfigError);
        config.scenario = Scenario::GradCheck;
        CHECK_NOTHROW(config.validate());
    }
    SUBCASE("batch counts") {
        config.scenario = Scenario::LinearSingleEnv;
        config.batch_counts = {3, 1};
        CHECK_THROWS_AS(config.validate(), ConfigError);
    }
    SUBCASE("case names are checked") {
        config.scenario = Scenario::LinearMultiEnv;
        config.cases = {"FOU", "XYZ"};
        CHECK_THROWS(config.validate());
    }
    SUBCASE("irmv1 has no mlp variant") {
        config.scenario = Scenario::RealClassification;
        config.dataset = "wine-red";
        config.methods = {Method::Erm, Method::Irmv1};
        CHECK_THROWS_AS(config.validate(), ConfigError);
    }
    SUBCASE("real scenarios need a dataset") {
        config.scenario = Scenario::RealRegression;
        config.dataset.clear();
        CHECK_THROWS_AS(config.validate(), ConfigError);
    }
    SUBCASE("trial defaults") {
        config.trials = 0;
        config.scenario = Scenario::TwoFeatureDemo;
        CHECK(config.resolved_trials() == 50);
        config.scenario = Scenario::RealRegression;
        CHECK(config.resolved_trials() == 10);
        config.trials = 4;
        CHECK(config.resolved_trials() == 4);
    }
}

TEST_CASE("demo scenario produces ordered records and a consistent summary") {
    const ExperimentConfig config = tiny_demo_config();
    const ScenarioResult result = run_scenario(config);

    CHECK(result.scenario == "demo");
    CHECK(result.file_stem == "demo");
    REQUIRE(result.records.size() == 6);  // 2 methods x 3 trials
    for (int t = 0; t < 3; ++t) {
        CHECK(result.records[t].method == "erm");
        CHECK(result.records[t].trial == t);
        CHECK(result.records[3 + t].method == "cglearn");
        CHECK(result.records[3 + t].trial == t);
    }
    const std::set<double> candidates{0.25, 1.0, 4.0, 16.0, 64.0};
    for (const auto& rec : result.records) {
        CHECK(rec.case_name == "demo");
        CHECK(rec.metrics.count("w1") == 1);
        CHECK(rec.metrics.count("w2_abs") == 1);
        CHECK(std::isfinite(rec.metrics.at("w1")));
        if (rec.method == "cglearn") {
            REQUIRE(rec.metrics.count("threshold") == 1);
            CHECK(candidates.count(rec.metrics.at("threshold")) == 1);
        } else {
            CHECK(rec.metrics.count("threshold") == 0);
        }
    }

    // 4 metric rows for erm, 5 for cglearn
    REQUIRE(result.summary.size() == 9);
    for (const auto& row : result.summary) {
        CHECK(row.n == 3);
        if (row.method == "cglearn" && row.metric != "threshold") {
            REQUIRE(row.p_vs_erm.has_value());
            CHECK(*row.p_vs_erm >= 0.0);
            CHECK(*row.p_vs_erm <= 1.0);
        }
        if (row.method == "erm") CHECK_FALSE(row.p_vs_erm.has_value());
    }

    // summary means match the per-trial records exactly
    for (const auto& row : result.summary) {
        double sum = 0.0;
        int n = 0;
        for (const auto& rec : result.records) {
            if (rec.method != row.method) continue;
            auto it = rec.metrics.find(row.metric);
            if (it == rec.metrics.end()) continue;
            sum += it->second;
            ++n;
        }
        REQUIRE(n == row.n);
        CHECK(row.mean == doctest::Approx(sum / n).epsilon(1e-13));
    }

    SUBCASE("reruns and worker pools do not change a byte") {
        const ScenarioResult again = run_scenario(config);
        CHECK(again.trials_jsonl("T") == result.trials_jsonl("T"));
        CHECK(again.summary_csv() == result.summary_csv());

        ExperimentConfig pooled = config;
        pooled.jobs = 3;
        const ScenarioResult threaded = run_scenario(pooled);
        CHECK(threaded.trials_jsonl("T") == result.trials_jsonl("T"));
        CHECK(threaded.summary_csv() == result.summary_csv());
    }

    SUBCASE("a fixed threshold skips selection") {
        ExperimentConfig fixed = config;
        fixed.threshold = 4.0;
        fixed.trials = 2;
        const ScenarioResult res = run_scenario(fixed);
        for (const auto& rec : res.records)
            if (rec.method == "cglearn") CHECK(rec.metrics.at("threshold") == 4.0);
    }
}

TEST_CASE("result files are written and reproducible") {
    TempDir dir;
    ExperimentConfig config = tiny_demo_config();
    config.trials = 2;
    config.output_dir = dir.path / "first";

    const ScenarioResult result = run_scenario(config);
    write_outputs(config, result);
    const fs::path jsonl = config.output_dir / "demo_trials.jsonl";
    const fs::path csv = config.output_dir / "demo_summary.csv";
    REQUIRE(fs::exists(jsonl));
    REQUIRE(fs::exists(csv));

    const auto lines = split_lines(read_file(jsonl));
    REQUIRE(lines.size() == result.records.size() + 1);
    const auto header = nlohmann::json::parse(lines[0]);
    CHECK(header.contains("created"));
    CHECK(header.at("scenario") == "demo");
    CHECK(header.at("trials") == "2");

    // every line parses, and the summary is recomputable from the records
    std::map<std::string, std::vector<double>> series;  // method|metric -> values
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto line = nlohmann::json::parse(lines[i]);
        for (const auto& [metric, value] : line.at("metrics").items())
            series[line.at("method").get<std::string>() + "|" + metric].push_back(
                value.get<double>());
    }
    const auto csv_lines = split_lines(read_file(csv));
    REQUIRE(csv_lines.size() == result.summary.size() + 1);
    CHECK(csv_lines[0] == "scenario,case,method,metric,mean,std,n,p_vs_erm,significant");
    for (const auto& row : result.summary) {
        const auto& values = series.at(row.method + "|" + row.metric);
        REQUIRE(static_cast<int>(values.size()) == row.n);
        double sum = 0.0;
        for (double v : values) sum += v;
        const double mean = sum / values.size();
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        const double std_dev = values.size() > 1 ? std::sqrt(ss / (values.size() - 1)) : 0.0;
        CHECK(row.mean == doctest::Approx(mean).epsilon(1e-13));
        CHECK(row.std == doctest::Approx(std_dev).epsilon(1e-13));
    }

    // same config, fresh run: identical except the timestamped header line
    ExperimentConfig rerun = config;
    rerun.output_dir = dir.path / "second";
    write_outputs(rerun, run_scenario(rerun));
    const auto lines2 = split_lines(read_file(rerun.output_dir / "demo_trials.jsonl"));
    REQUIRE(lines2.size() == lines.size());
    for (std::size_t i = 1; i < lines.size(); ++i) CHECK(lines2[i] == lines[i]);
    CHECK(read_file(rerun.output_dir / "demo_summary.csv") == read_file(csv));
}

TEST_CASE("linear multi-environment scenario") {
    ExperimentConfig config;
    config.scenario = Scenario::LinearMultiEnv;
    config.cases = {"FOU", "PES"};
    config.trials = 2;
    config.seed = 4;
    config.sem.n_samples = 80;
    config.sem.d_causal = 2;
    config.sem.d_effect = 2;
    config.train_steps = 200;
    config.quiet = true;

    const ScenarioResult result = run_scenario(config);
    REQUIRE(result.records.size() == 2 * 3 * 2);  // cases x methods x trials
    CHECK(result.records.front().case_name == "FOU");
    CHECK(result.records.back().case_name == "PES");
    for (const auto& rec : result.records) {
        CHECK(rec.metrics.at("causal_error") >= 0.0);
        CHECK(rec.metrics.at("noncausal_error") >= 0.0);
        CHECK(std::isfinite(rec.metrics.at("causal_error")));
        CHECK((rec.metrics.count("threshold") == 1) == (rec.method == "cglearn"));
    }
    // per case: erm 2 rows, cglearn 3, irmv1 2
    CHECK(result.summary.size() == 2 * 7);
    int compared = 0;
    for (const auto& row : result.summary) {
        if (row.method == "erm" || row.metric == "threshold") continue;
        REQUIRE(row.p_vs_erm.has_value());
        ++compared;
    }
    CHECK(compared == 2 * 4);
}

TEST_CASE("linear single-environment scenario") {
    ExperimentConfig config;
    config.scenario = Scenario::LinearSingleEnv;
    config.cases = {"FOU"};
    config.batch_counts = {3};
    config.methods = {Method::Erm, Method::CgLearn};
    config.trials = 2;
    config.seed = 6;
    config.sem.n_samples = 90;
    config.sem.d_causal = 2;
    config.sem.d_effect = 2;
    config.train_steps = 150;
    config.quiet = true;

    const ScenarioResult result = run_scenario(config);
    REQUIRE(result.records.size() == 4);
    for (const auto& rec : result.records) {
        CHECK(rec.case_name == "FOU_b3");
        CHECK(std::isfinite(rec.metrics.at("causal_error")));
    }
    CHECK(result.header.at("e") == "2");
}

TEST_CASE("gradient check scenario") {
    ExperimentConfig config;
    config.scenario = Scenario::GradCheck;
    config.trials = 5;
    config.seed = 2;
    config.quiet = true;

    const ScenarioResult result = run_scenario(config);
    CHECK(result.exit_code == 0);
    REQUIRE(result.records.size() == 10);
    for (const auto& rec : result.records) {
        const double err = rec.metrics.at("max_rel_err");
        if (rec.case_name == "linear") CHECK(err < 1e-6);
        if (rec.case_name == "mlp") CHECK(err < 1e-4);
    }
    REQUIRE(result.summary.size() == 2);
    CHECK(result.summary[0].case_name == "linear");
    CHECK(result.summary[1].case_name == "mlp");
    CHECK(result.header.at("status") == "pass");
}

TEST_CASE("cli exit codes") {
    TempDir dir;
    const std::string out = " --output " + (dir.path / "out").string() + " --quiet";

    SUBCASE("config errors exit with 2") {
        CHECK(run_cli("--scenario bogus" + out) == 2);
        CHECK(run_cli("--scenario demo --methods nonsense" + out) == 2);
        CHECK(run_cli("--no-such-flag" + out) == 2);
        CHECK(run_cli("--scenario real-regression --dataset unknown" + out) == 2);
    }

    SUBCASE("data errors exit with 3") {
        CHECK(run_cli("--scenario real-regression --dataset boston --data-dir /nonexistent" +
                      out) == 3);
    }

    SUBCASE("divergence exits with 4") {
        write_file(dir.path / "diverge.json", R"({
            "scenario": "demo",
            "methods": "erm",
            "trials": 1,
            "demo_samples": 200,
            "train_steps": 50,
            "step_scale": 1e8
        })");
        CHECK(run_cli("--config " + (dir.path / "diverge.json").string() + out) == 4);
    }

    SUBCASE("success exits with 0 and writes files") {
        write_file(dir.path / "demo.json", R"({
            "scenario": "demo",
            "methods": "erm,cglearn",
            "trials": 2,
            "seed": 3,
            "demo_samples": 400,
            "train_steps": 200
        })");
        CHECK(run_cli("--config " + (dir.path / "demo.json").string() + out) == 0);
        CHECK(fs::exists(dir.path / "out" / "demo_trials.jsonl"));
        CHECK(fs::exists(dir.path / "out" / "demo_summary.csv"));
        CHECK(run_cli("--help") == 0);
    }

    SUBCASE("gradcheck exits with 0 when gradients agree") {
        CHECK(run_cli("--scenario gradcheck --trials 3 --seed 1" + out) == 0);
    }
}

TEST_CASE("real regression scenario on boston when the csv is present") {
    const fs::path csv = fs::path(CGLEARN_SOURCE_DIR) / "data" / "boston.csv";
    if (!fs::exists(csv)) {
        MESSAGE("data/boston.csv not fetched; skipping (see tools/fetch_datasets.sh)");
        return;
    }
    ExperimentConfig config;
    config.scenario = Scenario::RealRegression;
    config.dataset = "boston";
    config.data_dir = fs::path(CGLEARN_SOURCE_DIR) / "data";
    config.methods = {Method::Erm, Method::CgLearn};
    config.trials = 1;
    config.seed = 1;
    config.k_range = {3, 4};
    config.train_steps = 2000;
    config.quiet = true;

    const ScenarioResult result = run_scenario(config);
    CHECK(result.file_stem == "real-regression_boston");
    REQUIRE(result.records.size() == 2);
    for (const auto& rec : result.records) {
        CHECK(rec.case_name == "boston");
        CHECK(rec.metrics.at("rmse_train") > 0.0);
        CHECK(std::isfinite(rec.metrics.at("rmse_test")));
    }
    const int k = std::stoi(result.header.at("clusters"));
    CHECK(k >= 3);
    CHECK(k <= 4);
    REQUIRE(result.extra_files.size() == 2);
    const auto report = nlohmann::json::parse(result.extra_files[0].second);
    CHECK(report.at("method") == "erm");
}
