#pragma once

#include "cglearn/common.hpp"
#include "cglearn/envcluster.hpp"
#include "cglearn/synthgen.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cglearn {

enum class Scenario {
    LinearMultiEnv,      // eight SEM cases, one linear model per method
    LinearSingleEnv,     // one environment split into pseudo-environment batches
    RealRegression,      // clustered environments + leave-one-env-out, linear models
    RealClassification,  // clustered environments + leave-one-env-out, MLP models
    TwoFeatureDemo,      // the two-feature illustration
    GradCheck,           // finite-difference audit of the analytic gradients
};

// Slugs: linear-multi, linear-single, real-regression, real-classification,
// demo, gradcheck. Unknown names throw ConfigError.
Scenario scenario_from_name(const std::string& name);
std::string scenario_name(Scenario scenario);

enum class Method { Erm, CgLearn, Irmv1 };

std::string method_name(Method method);
// Comma-separated list of erm / cglearn / irmv1, e.g. "erm,cglearn".
std::vector<Method> methods_from_string(const std::string& spec);

struct ExperimentConfig {
    Scenario scenario = Scenario::LinearMultiEnv;
    std::vector<Method> methods{Method::Erm, Method::CgLearn, Method::Irmv1};
    // 0 picks the scenario default: 50 for synthetic runs and gradcheck
    // instances, 10 for the leave-one-env-out scenarios.
    int trials = 0;
    std::uint64_t seed = 0;
    // Fixes the mask threshold; unset selects it on the validation split.
    std::optional<double> threshold;
    // LinearSingleEnv pseudo-environment splits; each entry is its own case.
    std::vector<int> batch_counts{3, 5};
    // Restricts the SEM scenarios to a subset of FOU..PES; empty runs all 8.
    std::vector<std::string> cases;
    std::string dataset;  // boston, yacht, wine-red, wine-white
    std::filesystem::path data_dir = "data";
    std::filesystem::path output_dir = "results";
    int jobs = 0;  // worker pool size; 0 = available parallelism
    bool quiet = false;

    // synthetic generator and linear trainer knobs
    SemConfig sem;  // env_values / n_samples / d_causal / d_effect
    double single_env_value = 2.0;
    long train_steps = 20000;
    double step_scale = 1.0;  // multiplies the spectral step size bound
    double irm_penalty = 1e4;
    int demo_samples = 20000;

    // MLP knobs for the classification scenario
    std::vector<int> mlp_hidden{32, 16};
    long mlp_steps = 400;
    double mlp_learning_rate = 0.05;

    KRange k_range;  // cluster count search range for the real scenarios

    int resolved_trials() const;
    void validate() const;
};

// Parses a JSON config file. Every key mirrors one field; unknown keys are
// rejected so typos fail loudly instead of silently running defaults.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct TrialRecord {
    std::string case_name;
    std::string method;
    int trial = 0;
    std::map<std::string, double> metrics;
};

struct SummaryRow {
    std::string scenario;
    std::string case_name;
    std::string method;
    std::string metric;
    double mean = 0.0;
    double std = 0.0;
    int n = 0;
    // Welch p-value of this method's per-trial series against ERM's; empty
    // for ERM itself, for metrics ERM does not produce, and for n < 2.
    std::optional<double> p_vs_erm;
    std::optional<bool> significant;
};

struct ScenarioResult {
    std::string scenario;
    std::string file_stem;  // output files are <stem>_trials.jsonl / <stem>_summary.csv
    // deterministic JSON fields for the header line (timestamp is added on write)
    std::map<std::string, std::string> header;
    std::vector<std::string> metric_names;
    std::vector<TrialRecord> records;  // ordered by (case, method, trial)
    std::vector<SummaryRow> summary;
    // extra artifacts, e.g. per-method leave-one-env-out reports
    std::vector<std::pair<std::string, std::string>> extra_files;
    int exit_code = 0;  // gradcheck failures report 5 here

    std::string trials_jsonl(const std::string& timestamp) const;
    std::string summary_csv() const;
    std::string table() const;  // fixed-width console rendering
};

// Executes the configured scenario and returns the in-memory result.
// Throws ConfigError / DataError / ClusteringError / TrainingError.
ScenarioResult run_scenario(const ExperimentConfig& config);

// Writes trials + summary + extra files under config.output_dir.
void write_outputs(const ExperimentConfig& config, const ScenarioResult& result);

// run_scenario + write_outputs + console table, with exceptions mapped to
// process exit codes: 0 success, 2 config error, 3 data error, 4 training
// divergence, 5 failed gradient check.
int run_experiment(const ExperimentConfig& config);

}  // namespace cglearn
