#include "cglearn/experiment.hpp"

#include "cglearn/data_io.hpp"
#include "cglearn/evalharness.hpp"
#include "cglearn/lingrad.hpp"
#include "cglearn/mlp.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace cglearn {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kAllCases{"FOU", "FOS", "FEU", "FES",
                                         "POU", "POS", "PEU", "PES"};

Method method_from_name(const std::string& name) {
    if (name == "erm") return Method::Erm;
    if (name == "cglearn") return Method::CgLearn;
    if (name == "irmv1") return Method::Irmv1;
    throw ConfigError("unknown method '" + name + "' (expected erm, cglearn, or irmv1)");
}

std::vector<std::string> method_names(const std::vector<Method>& methods) {
    std::vector<std::string> names;
    names.reserve(methods.size());
    for (Method m : methods) names.push_back(method_name(m));
    return names;
}

// Index-queue worker pool. Each task owns one result slot, so the merge
// order never depends on the pool size.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& body) {
    std::size_t workers = jobs > 0 ? static_cast<std::size_t>(jobs)
                                   : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto drain = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(drain);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::string iso_timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char buf[24];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &utc);
    return buf;
}

DatasetSpec dataset_spec_for(const std::string& name, const std::filesystem::path& data_dir) {
    DatasetSpec spec;
    spec.name = name;
    if (name == "boston") {
        spec.path = data_dir / "boston.csv";
        spec.target_column = "MEDV";
        spec.task = Task::Regression;
        spec.n_expected = 506;
        spec.d_expected = 13;
    } else if (name == "yacht") {
        spec.path = data_dir / "yacht.csv";
        spec.target_column = "resistance";
        spec.task = Task::Regression;
        spec.n_expected = 308;
        spec.d_expected = 6;
    } else if (name == "wine-red") {
        spec.path = data_dir / "winequality-red.csv";
        spec.target_column = "quality";
        spec.task = Task::Classification;
        spec.n_expected = 1599;
        spec.d_expected = 11;
    } else if (name == "wine-white") {
        spec.path = data_dir / "winequality-white.csv";
        spec.target_column = "quality";
        spec.task = Task::Classification;
        spec.n_expected = 4898;
        spec.d_expected = 11;
    } else {
        throw ConfigError("unknown dataset '" + name +
                          "' (expected boston, yacht, wine-red, or wine-white)");
    }
    return spec;
}

std::vector<std::string> resolve_cases(const ExperimentConfig& config) {
    if (config.cases.empty()) return kAllCases;
    for (const auto& name : config.cases) sem_config_from_name(name);
    return config.cases;
}

// The largest e serves as the validation environment; ties keep the later
// index, mirroring the highest-index rule of the leave-one-out protocol.
std::size_t validation_env_index(const std::vector<double>& env_values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < env_values.size(); ++i)
        if (env_values[i] >= env_values[best]) best = i;
    return best;
}

struct FitOutcome {
    LinearModel model;
    double threshold = kNan;  // NaN when the method has no mask threshold
};

// Shared linear protocol. CGLearn trains on the training environments and
// selects its threshold on the validation one; the baselines have nothing to
// select, so they see the validation rows as extra training data (erm_pool
// and irm_pool, which differ only in the single-environment scenario).
FitOutcome fit_linear(Method method, const EnvironmentSet& train_envs,
                      const TabularDataset& validation, const EnvironmentSet& erm_pool,
                      const EnvironmentSet& irm_pool, const ExperimentConfig& cfg) {
    TrainConfig config;
    config.steps = cfg.train_steps;
    switch (method) {
        case Method::Erm:
            config.learning_rate = stable_learning_rate(erm_pool) * cfg.step_scale;
            return {train_erm(erm_pool, config), kNan};
        case Method::CgLearn: {
            config.learning_rate = stable_learning_rate(train_envs) * cfg.step_scale;
            if (cfg.threshold) {
                config.threshold = *cfg.threshold;
                return {train_cglearn(train_envs, config).first, *cfg.threshold};
            }
            auto [threshold, model] = select_threshold(train_envs, validation, config);
            return {model, threshold};
        }
        case Method::Irmv1: {
            // quartic penalty: the quadratic-stable step is shrunk by 0.02,
            // and backed off further when a run still diverges
            config.learning_rate = stable_learning_rate(irm_pool) * cfg.step_scale * 0.02;
            for (int attempt = 0;; ++attempt) {
                try {
                    return {train_irmv1(irm_pool, config, cfg.irm_penalty), kNan};
                } catch (const TrainingError&) {
                    if (attempt >= 6) throw;
                    config.learning_rate *= 0.25;
                }
            }
        }
    }
    throw ConfigError("unhandled method");
}

using CellMetrics = std::map<std::string, std::map<std::string, double>>;

// cells is case-major, then trial; emits records ordered (case, method, trial).
void flatten(ScenarioResult& result, const std::vector<std::string>& case_names,
             const std::vector<std::string>& methods, int trials,
             const std::vector<CellMetrics>& cells) {
    for (std::size_t ci = 0; ci < case_names.size(); ++ci) {
        for (const auto& method : methods) {
            for (int t = 0; t < trials; ++t) {
                const auto& cell = cells[ci * static_cast<std::size_t>(trials) + t];
                auto it = cell.find(method);
                if (it == cell.end()) continue;
                result.records.push_back({case_names[ci], method, t, it->second});
            }
        }
    }
}

double mean_of(const std::vector<double>& values) {
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

double sample_std(const std::vector<double>& values, double mean) {
    if (values.size() < 2) return 0.0;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

void build_summary(ScenarioResult& result, const std::vector<std::string>& case_names,
                   const std::vector<std::string>& methods) {
    for (const auto& case_name : case_names) {
        // method -> metric -> per-trial series, in record (trial) order
        std::map<std::string, std::map<std::string, std::vector<double>>> series;
        for (const auto& rec : result.records) {
            if (rec.case_name != case_name) continue;
            for (const auto& [metric, value] : rec.metrics)
                series[rec.method][metric].push_back(value);
        }
        for (const auto& method : methods) {
            auto mit = series.find(method);
            if (mit == series.end()) continue;
            for (const auto& metric : result.metric_names) {
                auto sit = mit->second.find(metric);
                if (sit == mit->second.end()) continue;
                const auto& values = sit->second;
                SummaryRow row;
                row.scenario = result.scenario;
                row.case_name = case_name;
                row.method = method;
                row.metric = metric;
                row.n = static_cast<int>(values.size());
                row.mean = mean_of(values);
                row.std = sample_std(values, row.mean);
                if (method != "erm") {
                    auto eit = series.find("erm");
                    if (eit != series.end()) {
                        auto base = eit->second.find(metric);
                        if (base != eit->second.end() && values.size() >= 2 &&
                            base->second.size() >= 2) {
                            const SignificanceResult sig = welch_ttest(values, base->second);
                            row.p_vs_erm = sig.p;
                            row.significant = sig.significant;
                        }
                    }
                }
                result.summary.push_back(row);
            }
        }
    }
}

std::map<std::string, std::string> base_header(const ExperimentConfig& cfg,
                                               const std::string& slug, int trials) {
    return {{"scenario", slug},
            {"seed", std::to_string(cfg.seed)},
            {"trials", std::to_string(trials)}};
}

ScenarioResult run_linear_multi(const ExperimentConfig& cfg) {
    ScenarioResult result;
    result.scenario = scenario_name(cfg.scenario);
    result.file_stem = result.scenario;
    result.metric_names = {"causal_error", "noncausal_error", "threshold"};
    const auto case_names = resolve_cases(cfg);
    const auto methods = method_names(cfg.methods);
    const int trials = cfg.resolved_trials();
    result.header = base_header(cfg, result.scenario, trials);

    const std::size_t val_index = validation_env_index(cfg.sem.env_values);
    std::vector<CellMetrics> cells(case_names.size() * static_cast<std::size_t>(trials));
    parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
        const std::size_t ci = idx / static_cast<std::size_t>(trials);
        const int t = static_cast<int>(idx % static_cast<std::size_t>(trials));
        SemConfig sem = sem_config_from_name(case_names[ci]);
        sem.env_values = cfg.sem.env_values;
        sem.n_samples = cfg.sem.n_samples;
        sem.d_causal = cfg.sem.d_causal;
        sem.d_effect = cfg.sem.d_effect;
        sem.seed = derive_seed(derive_seed(cfg.seed, 1000 + ci), static_cast<std::uint64_t>(t));
        auto [envs, truth] = generate_environments(sem);

        EnvironmentSet train;
        for (std::size_t i = 0; i < envs.m(); ++i)
            if (i != val_index) train.environments.push_back(envs.env(i));
        const TabularDataset& validation = envs.env(val_index);

        for (Method m : cfg.methods) {
            const FitOutcome fit = fit_linear(m, train, validation, envs, envs, cfg);
            auto [causal, noncausal] = coefficient_errors(fit.model, truth);
            auto& metrics = cells[idx][method_name(m)];
            metrics["causal_error"] = causal;
            metrics["noncausal_error"] = noncausal;
            if (!std::isnan(fit.threshold)) metrics["threshold"] = fit.threshold;
        }
    });
    flatten(result, case_names, methods, trials, cells);
    build_summary(result, case_names, methods);
    return result;
}

ScenarioResult run_linear_single(const ExperimentConfig& cfg) {
    ScenarioResult result;
    result.scenario = scenario_name(cfg.scenario);
    result.file_stem = result.scenario;
    result.metric_names = {"causal_error", "noncausal_error", "threshold"};
    const auto base_cases = resolve_cases(cfg);
    const auto methods = method_names(cfg.methods);
    const int trials = cfg.resolved_trials();
    result.header = base_header(cfg, result.scenario, trials);
    result.header["e"] = format_double(cfg.single_env_value);

    std::vector<std::string> case_names;
    for (const auto& base : base_cases)
        for (int b : cfg.batch_counts) case_names.push_back(base + "_b" + std::to_string(b));

    const std::size_t bn = cfg.batch_counts.size();
    std::vector<CellMetrics> cells(case_names.size() * static_cast<std::size_t>(trials));
    parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
        const std::size_t per_case = bn * static_cast<std::size_t>(trials);
        const std::size_t ci = idx / per_case;
        const std::size_t bi = (idx % per_case) / static_cast<std::size_t>(trials);
        const int t = static_cast<int>(idx % static_cast<std::size_t>(trials));
        const int b = cfg.batch_counts[bi];

        SemConfig sem = sem_config_from_name(base_cases[ci]);
        sem.env_values = {cfg.single_env_value};
        sem.n_samples = cfg.sem.n_samples;
        sem.d_causal = cfg.sem.d_causal;
        sem.d_effect = cfg.sem.d_effect;
        // the environment draw depends on (case, trial) only, so every batch
        // count sees the same data
        sem.seed = derive_seed(derive_seed(cfg.seed, 2000 + ci), static_cast<std::uint64_t>(t));
        auto [envs, truth] = generate_environments(sem);
        const TabularDataset& full = envs.env(0);

        EnvironmentSet batches =
            split_into_batches(full, b, derive_seed(sem.seed, 100 + static_cast<std::uint64_t>(b)));
        EnvironmentSet train;
        for (int i = 0; i + 1 < b; ++i) train.environments.push_back(batches.env(i));
        const TabularDataset& validation = batches.env(static_cast<std::size_t>(b) - 1);
        EnvironmentSet unsplit;
        unsplit.environments.push_back(full);

        for (Method m : cfg.methods) {
            // ERM ignores the batch structure entirely; IRM needs multiple
            // environments, so it treats the batches as such
            const FitOutcome fit = fit_linear(m, train, validation, unsplit, batches, cfg);
            auto [causal, noncausal] = coefficient_errors(fit.model, truth);
            auto& metrics = cells[idx][method_name(m)];
            metrics["causal_error"] = causal;
            metrics["noncausal_error"] = noncausal;
            if (!std::isnan(fit.threshold)) metrics["threshold"] = fit.threshold;
        }
    });
    flatten(result, case_names, methods, trials, cells);
    build_summary(result, case_names, methods);
    return result;
}

ScenarioResult run_demo(const ExperimentConfig& cfg) {
    ScenarioResult result;
    result.scenario = scenario_name(cfg.scenario);
    result.file_stem = result.scenario;
    result.metric_names = {"w1", "w2", "w1_error", "w2_abs", "threshold"};
    const std::vector<std::string> case_names{"demo"};
    const auto methods = method_names(cfg.methods);
    const int trials = cfg.resolved_trials();
    result.header = base_header(cfg, result.scenario, trials);
    result.header["samples"] = std::to_string(cfg.demo_samples);

    // Unlike the benchmark environments, e scales the spurious coupling
    // itself (x2 = e*y + noise), so the weakest-coupling environment is the
    // out-of-distribution holdout: a model leaning on x2 cannot carry that
    // advantage into it, while holding out a strong-coupling environment
    // would reward exactly the reliance the demo is meant to rule out.
    std::size_t val_index = 0;
    for (std::size_t i = 1; i < cfg.sem.env_values.size(); ++i)
        if (cfg.sem.env_values[i] < cfg.sem.env_values[val_index]) val_index = i;
    std::vector<CellMetrics> cells(static_cast<std::size_t>(trials));
    parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
        const int t = static_cast<int>(idx);
        EnvironmentSet envs = generate_two_feature_demo(
            cfg.sem.env_values, cfg.demo_samples,
            derive_seed(derive_seed(cfg.seed, 3000), static_cast<std::uint64_t>(t)));
        EnvironmentSet train;
        for (std::size_t i = 0; i < envs.m(); ++i)
            if (i != val_index) train.environments.push_back(envs.env(i));
        const TabularDataset& validation = envs.env(val_index);

        for (Method m : cfg.methods) {
            const FitOutcome fit = fit_linear(m, train, validation, envs, envs, cfg);
            auto& metrics = cells[idx][method_name(m)];
            const double w1 = fit.model.weights(0);
            const double w2 = fit.model.weights(1);
            metrics["w1"] = w1;
            metrics["w2"] = w2;
            metrics["w1_error"] = std::abs(w1 - 1.0);
            metrics["w2_abs"] = std::abs(w2);
            if (!std::isnan(fit.threshold)) metrics["threshold"] = fit.threshold;
        }
    });
    flatten(result, case_names, methods, trials, cells);
    build_summary(result, case_names, methods);
    return result;
}

Vector argmax_rows(const Matrix& scores) {
    Vector out(scores.rows());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        out(i) = static_cast<double>(best);
    }
    return out;
}

EvalMethod linear_eval_method(Method m, const ExperimentConfig& cfg) {
    LinearMethodOptions options;
    options.config.steps = cfg.train_steps;
    options.step_scale = cfg.step_scale;
    if (cfg.threshold) {
        options.config.threshold = *cfg.threshold;
        options.config.threshold_candidates = {*cfg.threshold};
    }
    switch (m) {
        case Method::Erm:
            return linear_erm_method(options);
        case Method::CgLearn:
            return linear_cglearn_method(options);
        case Method::Irmv1:
            return linear_irmv1_method(options, cfg.irm_penalty);
    }
    throw ConfigError("unhandled method");
}

EvalMethod mlp_eval_method(Method m, const ExperimentConfig& cfg) {
    MlpTrainConfig base;
    base.hidden_sizes = cfg.mlp_hidden;
    base.steps = cfg.mlp_steps;
    base.learning_rate = cfg.mlp_learning_rate;
    base.loss = MlpLoss::CrossEntropy;
    if (cfg.threshold) {
        base.threshold = *cfg.threshold;
        base.threshold_candidates = {*cfg.threshold};
    }
    EvalMethod method;
    method.name = method_name(m);
    if (m == Method::Erm) {
        method.uses_validation = false;
        method.fit = [base](const EnvironmentSet& train, const TabularDataset&,
                            std::uint64_t seed) {
            MlpTrainConfig config = base;
            config.seed = seed;
            const MlpModel model = train_mlp_erm(train, config);
            return [model](const Matrix& features) { return argmax_rows(forward(model, features)); };
        };
    } else if (m == Method::CgLearn) {
        method.fit = [base](const EnvironmentSet& train, const TabularDataset& validation,
                            std::uint64_t seed) {
            MlpTrainConfig config = base;
            config.seed = seed;
            const MlpModel model = select_mlp_threshold(train, validation, config).second;
            return [model](const Matrix& features) { return argmax_rows(forward(model, features)); };
        };
    } else {
        throw ConfigError("irmv1 is only implemented for the linear model scenarios");
    }
    return method;
}

ScenarioResult run_real(const ExperimentConfig& cfg, bool classification) {
    const DatasetSpec spec = dataset_spec_for(cfg.dataset, cfg.data_dir);
    if (classification && spec.task != Task::Classification)
        throw ConfigError(cfg.dataset + " is a regression dataset; use real-regression");
    if (!classification && spec.task != Task::Regression)
        throw ConfigError(cfg.dataset + " is a classification dataset; use real-classification");

    const TabularDataset data = load_csv(spec);
    const auto [envs, assignment] = build_environments(data, cfg.k_range, cfg.seed);

    LoeoConfig loeo;
    loeo.trials = cfg.resolved_trials();
    loeo.seed = cfg.seed;

    ScenarioResult result;
    result.scenario = scenario_name(cfg.scenario);
    result.file_stem = result.scenario + "_" + cfg.dataset;
    result.header = base_header(cfg, result.scenario, loeo.trials);
    result.header["dataset"] = cfg.dataset;
    result.header["clusters"] = std::to_string(assignment.k);
    result.header["silhouette"] = format_double(assignment.silhouette);

    for (Method m : cfg.methods) {
        const EvalMethod method =
            classification ? mlp_eval_method(m, cfg) : linear_eval_method(m, cfg);
        EvalReport report = leave_one_env_out(envs, method, loeo);
        if (result.metric_names.empty()) result.metric_names = report.metric_names;
        for (int t = 0; t < loeo.trials; ++t) {
            TrialRecord rec{cfg.dataset, method_name(m), t, {}};
            for (const auto& name : report.metric_names)
                rec.metrics[name] = report.per_trial.at(name)[static_cast<std::size_t>(t)];
            result.records.push_back(std::move(rec));
        }
        result.extra_files.emplace_back(
            result.file_stem + "_" + method_name(m) + "_report.json", report.to_json());
    }
    build_summary(result, {cfg.dataset}, method_names(cfg.methods));
    return result;
}

// --- finite-difference audit -------------------------------------------------

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double linear_fd_instance(std::uint64_t seed) {
    auto rng = make_engine(seed);
    std::uniform_int_distribution<int> n_dist(20, 60);
    std::uniform_int_distribution<int> d_dist(2, 6);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int d = d_dist(rng);

    EnvironmentSet envs;
    for (int e = 0; e < 2; ++e) {
        TabularDataset env;
        const int n = n_dist(rng);
        env.features = Matrix::NullaryExpr(n, d, [&] { return normal(rng); });
        env.target = Vector::NullaryExpr(n, [&] { return normal(rng); });
        for (int j = 0; j < d; ++j) env.feature_names.push_back("x" + std::to_string(j + 1));
        envs.environments.push_back(std::move(env));
    }
    LinearModel model;
    model.weights = Vector::NullaryExpr(d, [&] { return 0.5 * normal(rng); });
    model.bias = 0.1 * normal(rng);

    const Matrix analytic = env_gradients(model, envs);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t e = 0; e < envs.m(); ++e) {
        for (int j = 0; j <= d; ++j) {
            LinearModel plus = model;
            LinearModel minus = model;
            if (j < d) {
                plus.weights(j) += h;
                minus.weights(j) -= h;
            } else {
                plus.bias += h;
                minus.bias -= h;
            }
            const double fd = (mse(plus, envs.env(e)) - mse(minus, envs.env(e))) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic(static_cast<Eigen::Index>(e), j), fd));
        }
    }
    return worst;
}

double min_abs_preactivation(const MlpModel& model, const Matrix& features) {
    Matrix post = features;
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < model.layer_weights.size(); ++l) {
        Matrix pre = post * model.layer_weights[l];
        pre.rowwise() += model.layer_biases[l].transpose();
        lowest = std::min(lowest, pre.cwiseAbs().minCoeff());
        post = pre.cwiseMax(0.0);
    }
    return lowest;
}

double mlp_fd_instance(std::uint64_t seed, bool classification) {
    auto rng = make_engine(seed);
    std::uniform_int_distribution<int> n_dist(15, 40);
    std::uniform_int_distribution<int> d_dist(2, 5);
    std::uniform_int_distribution<int> h_dist(3, 6);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int d = d_dist(rng);
    const int n = n_dist(rng);
    const int n_classes = 3;

    MlpTrainConfig config;
    config.hidden_sizes = {h_dist(rng)};
    if (seed % 3 == 0) config.hidden_sizes.push_back(h_dist(rng));
    config.seed = derive_seed(seed, 1);
    const MlpLoss loss = classification ? MlpLoss::CrossEntropy : MlpLoss::MSE;
    config.loss = loss;
    const MlpModel model = init_mlp(d, config, classification ? Task::Classification : Task::Regression,
                                    classification ? n_classes : 0);

    TabularDataset env;
    env.task = classification ? Task::Classification : Task::Regression;
    env.n_classes = classification ? n_classes : 0;
    for (int j = 0; j < d; ++j) env.feature_names.push_back("x" + std::to_string(j + 1));
    if (classification) {
        std::uniform_int_distribution<int> cls(0, n_classes - 1);
        env.target = Vector::NullaryExpr(n, [&] { return static_cast<double>(cls(rng)); });
    } else {
        env.target = Vector::NullaryExpr(n, [&] { return normal(rng); });
    }
    // central differences assume a locally smooth loss; redraw inputs that
    // land a hidden unit too close to the ReLU kink
    for (int attempt = 0; attempt < 200; ++attempt) {
        env.features = Matrix::NullaryExpr(n, d, [&] { return normal(rng); });
        if (min_abs_preactivation(model, env.features) > 1e-3) break;
    }

    const MlpGradients grads = env_backward(model, env, loss);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t l = 0; l < model.layer_weights.size(); ++l) {
        for (Eigen::Index r = 0; r < model.layer_weights[l].rows(); ++r) {
            for (Eigen::Index c = 0; c < model.layer_weights[l].cols(); ++c) {
                MlpModel plus = model;
                MlpModel minus = model;
                plus.layer_weights[l](r, c) += h;
                minus.layer_weights[l](r, c) -= h;
                const double fd = (mlp_loss(plus, env, loss) - mlp_loss(minus, env, loss)) / (2.0 * h);
                worst = std::max(worst, rel_err(grads.layer_weights[l](r, c), fd));
            }
        }
        for (Eigen::Index r = 0; r < model.layer_biases[l].size(); ++r) {
            MlpModel plus = model;
            MlpModel minus = model;
            plus.layer_biases[l](r) += h;
            minus.layer_biases[l](r) -= h;
            const double fd = (mlp_loss(plus, env, loss) - mlp_loss(minus, env, loss)) / (2.0 * h);
            worst = std::max(worst, rel_err(grads.layer_biases[l](r), fd));
        }
    }
    return worst;
}

ScenarioResult run_gradcheck(const ExperimentConfig& cfg) {
    ScenarioResult result;
    result.scenario = scenario_name(cfg.scenario);
    result.file_stem = result.scenario;
    result.metric_names = {"max_rel_err"};
    const int n = cfg.resolved_trials();
    result.header = base_header(cfg, result.scenario, n);

    std::vector<double> linear_err(static_cast<std::size_t>(n));
    std::vector<double> mlp_err(static_cast<std::size_t>(n));
    parallel_for(linear_err.size(), cfg.jobs, [&](std::size_t i) {
        linear_err[i] = linear_fd_instance(derive_seed(cfg.seed, 4000 + i));
    });
    parallel_for(mlp_err.size(), cfg.jobs, [&](std::size_t i) {
        mlp_err[i] = mlp_fd_instance(derive_seed(cfg.seed, 5000 + i), i % 2 == 1);
    });

    constexpr double kLinearTol = 1e-6;
    constexpr double kMlpTol = 1e-4;
    for (int t = 0; t < n; ++t) {
        result.records.push_back(
            {"linear", "check", t, {{"max_rel_err", linear_err[static_cast<std::size_t>(t)]}}});
    }
    for (int t = 0; t < n; ++t) {
        result.records.push_back(
            {"mlp", "check", t, {{"max_rel_err", mlp_err[static_cast<std::size_t>(t)]}}});
    }
    const bool linear_ok =
        std::all_of(linear_err.begin(), linear_err.end(), [&](double e) { return e < kLinearTol; });
    const bool mlp_ok =
        std::all_of(mlp_err.begin(), mlp_err.end(), [&](double e) { return e < kMlpTol; });
    result.exit_code = (linear_ok && mlp_ok) ? 0 : 5;
    result.header["status"] = (result.exit_code == 0) ? "pass" : "fail";
    build_summary(result, {"linear", "mlp"}, {"check"});
    return result;
}

}  // namespace

Scenario scenario_from_name(const std::string& name) {
    if (name == "linear-multi") return Scenario::LinearMultiEnv;
    if (name == "linear-single") return Scenario::LinearSingleEnv;
    if (name == "real-regression") return Scenario::RealRegression;
    if (name == "real-classification") return Scenario::RealClassification;
    if (name == "demo") return Scenario::TwoFeatureDemo;
    if (name == "gradcheck") return Scenario::GradCheck;
    throw ConfigError("unknown scenario '" + name +
                      "' (expected linear-multi, linear-single, real-regression, "
                      "real-classification, demo, or gradcheck)");
}

std::string scenario_name(Scenario scenario) {
    switch (scenario) {
        case Scenario::LinearMultiEnv: return "linear-multi";
        case Scenario::LinearSingleEnv: return "linear-single";
        case Scenario::RealRegression: return "real-regression";
        case Scenario::RealClassification: return "real-classification";
        case Scenario::TwoFeatureDemo: return "demo";
        case Scenario::GradCheck: return "gradcheck";
    }
    throw ConfigError("unhandled scenario");
}

std::string method_name(Method method) {
    switch (method) {
        case Method::Erm: return "erm";
        case Method::CgLearn: return "cglearn";
        case Method::Irmv1: return "irmv1";
    }
    throw ConfigError("unhandled method");
}

std::vector<Method> methods_from_string(const std::string& spec) {
    std::vector<Method> out;
    std::stringstream stream(spec);
    std::string item;
    while (std::getline(stream, item, ',')) {
        const auto first = item.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const auto last = item.find_last_not_of(" \t");
        out.push_back(method_from_name(item.substr(first, last - first + 1)));
    }
    if (out.empty()) throw ConfigError("no methods named in '" + spec + "'");
    return out;
}

int ExperimentConfig::resolved_trials() const {
    if (trials > 0) return trials;
    if (scenario == Scenario::RealRegression || scenario == Scenario::RealClassification)
        return 10;
    return 50;
}

void ExperimentConfig::validate() const {
    if (methods.empty() && scenario != Scenario::GradCheck)
        throw ConfigError("at least one method is required");
    if (trials < 0) throw ConfigError("trials must be non-negative");
    if (jobs < 0) throw ConfigError("jobs must be non-negative");
    if (step_scale <= 0.0) throw ConfigError("step_scale must be positive");
    if (train_steps < 1) throw ConfigError("train_steps must be at least 1");
    if (irm_penalty < 0.0) throw ConfigError("irm_penalty must be non-negative");
    if (threshold && *threshold < 0.0) throw ConfigError("threshold must be non-negative");

    switch (scenario) {
        case Scenario::LinearMultiEnv:
        case Scenario::LinearSingleEnv:
            sem.validate();
            for (const auto& name : cases) sem_config_from_name(name);
            if (scenario == Scenario::LinearSingleEnv) {
                if (batch_counts.empty())
                    throw ConfigError("batches must name at least one split");
                for (int b : batch_counts)
                    if (b < 2) throw ConfigError("each batch count must be at least 2");
                if (single_env_value <= 0.0)
                    throw ConfigError("single_env_value must be positive");
            }
            break;
        case Scenario::TwoFeatureDemo:
            if (sem.env_values.empty())
                throw ConfigError("env_values must name at least one environment");
            if (demo_samples < 2) throw ConfigError("demo_samples must be at least 2");
            break;
        case Scenario::RealRegression:
        case Scenario::RealClassification:
            if (dataset.empty())
                throw ConfigError("the real-data scenarios require a dataset name");
            if (k_range.lo < 2 || k_range.hi < k_range.lo)
                throw ConfigError("cluster range must satisfy 2 <= lo <= hi");
            if (scenario == Scenario::RealClassification) {
                for (Method m : methods)
                    if (m == Method::Irmv1)
                        throw ConfigError(
                            "irmv1 is only implemented for the linear model scenarios");
                if (mlp_hidden.empty())
                    throw ConfigError("mlp_hidden must name at least one layer");
                for (int h : mlp_hidden)
                    if (h < 1) throw ConfigError("hidden layer widths must be positive");
                if (mlp_steps < 1) throw ConfigError("mlp_steps must be at least 1");
                if (mlp_learning_rate <= 0.0)
                    throw ConfigError("mlp_learning_rate must be positive");
            }
            break;
        case Scenario::GradCheck:
            break;
    }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");

    ExperimentConfig config;
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "scenario") {
                config.scenario = scenario_from_name(value.get<std::string>());
            } else if (key == "methods") {
                if (value.is_string()) {
                    config.methods = methods_from_string(value.get<std::string>());
                } else {
                    config.methods.clear();
                    for (const auto& entry : value)
                        config.methods.push_back(method_from_name(entry.get<std::string>()));
                    if (config.methods.empty()) throw ConfigError("methods must not be empty");
                }
            } else if (key == "trials") {
                config.trials = value.get<int>();
            } else if (key == "seed") {
                config.seed = value.get<std::uint64_t>();
            } else if (key == "threshold") {
                if (!value.is_null()) config.threshold = value.get<double>();
            } else if (key == "batches") {
                config.batch_counts = value.get<std::vector<int>>();
            } else if (key == "cases") {
                config.cases = value.get<std::vector<std::string>>();
            } else if (key == "dataset") {
                config.dataset = value.get<std::string>();
            } else if (key == "data_dir") {
                config.data_dir = value.get<std::string>();
            } else if (key == "output") {
                config.output_dir = value.get<std::string>();
            } else if (key == "jobs") {
                config.jobs = value.get<int>();
            } else if (key == "quiet") {
                config.quiet = value.get<bool>();
            } else if (key == "env_values") {
                config.sem.env_values = value.get<std::vector<double>>();
            } else if (key == "n_samples") {
                config.sem.n_samples = value.get<int>();
            } else if (key == "d_causal") {
                config.sem.d_causal = value.get<int>();
            } else if (key == "d_effect") {
                config.sem.d_effect = value.get<int>();
            } else if (key == "single_env_value") {
                config.single_env_value = value.get<double>();
            } else if (key == "train_steps") {
                config.train_steps = value.get<long>();
            } else if (key == "step_scale") {
                config.step_scale = value.get<double>();
            } else if (key == "irm_penalty") {
                config.irm_penalty = value.get<double>();
            } else if (key == "demo_samples") {
                config.demo_samples = value.get<int>();
            } else if (key == "mlp_hidden") {
                config.mlp_hidden = value.get<std::vector<int>>();
            } else if (key == "mlp_steps") {
                config.mlp_steps = value.get<long>();
            } else if (key == "mlp_learning_rate") {
                config.mlp_learning_rate = value.get<double>();
            } else if (key == "k_lo") {
                config.k_range.lo = value.get<int>();
            } else if (key == "k_hi") {
                config.k_range.hi = value.get<int>();
            } else {
                throw ConfigError("unknown config key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    return config;
}

std::string ScenarioResult::trials_jsonl(const std::string& timestamp) const {
    nlohmann::json head;
    head["created"] = timestamp;
    for (const auto& [key, value] : header) head[key] = value;
    std::string out = head.dump();
    out += '\n';
    for (const auto& rec : records) {
        nlohmann::json line;
        line["case"] = rec.case_name;
        line["method"] = rec.method;
        line["trial"] = rec.trial;
        line["metrics"] = rec.metrics;
        out += line.dump();
        out += '\n';
    }
    return out;
}

std::string ScenarioResult::summary_csv() const {
    std::string out = "scenario,case,method,metric,mean,std,n,p_vs_erm,significant\n";
    for (const auto& row : summary) {
        out += row.scenario + ',' + row.case_name + ',' + row.method + ',' + row.metric + ',';
        out += format_double(row.mean) + ',' + format_double(row.std) + ',';
        out += std::to_string(row.n) + ',';
        if (row.p_vs_erm) out += format_double(*row.p_vs_erm);
        out += ',';
        if (row.significant) out += *row.significant ? "1" : "0";
        out += '\n';
    }
    return out;
}

std::string ScenarioResult::table() const {
    std::ostringstream os;
    os << scenario;
    for (const auto& [key, value] : header)
        if (key != "scenario") os << "  " << key << "=" << value;
    os << '\n';
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %-9s %-18s %12s %12s %5s %10s\n", "case", "method",
                  "metric", "mean", "std", "n", "p_vs_erm");
    os << line << std::string(84, '-') << '\n';
    for (const auto& row : summary) {
        char mean_buf[24], std_buf[24], p_buf[24];
        std::snprintf(mean_buf, sizeof mean_buf, "%.4g", row.mean);
        std::snprintf(std_buf, sizeof std_buf, "%.4g", row.std);
        if (row.p_vs_erm) {
            std::snprintf(p_buf, sizeof p_buf, "%.2g%s", *row.p_vs_erm,
                          row.significant.value_or(false) ? " *" : "");
        } else {
            std::snprintf(p_buf, sizeof p_buf, "-");
        }
        std::snprintf(line, sizeof line, "%-12s %-9s %-18s %12s %12s %5d %10s\n",
                      row.case_name.c_str(), row.method.c_str(), row.metric.c_str(), mean_buf,
                      std_buf, row.n, p_buf);
        os << line;
    }
    return os.str();
}

ScenarioResult run_scenario(const ExperimentConfig& config) {
    config.validate();
    switch (config.scenario) {
        case Scenario::LinearMultiEnv: return run_linear_multi(config);
        case Scenario::LinearSingleEnv: return run_linear_single(config);
        case Scenario::RealRegression: return run_real(config, false);
        case Scenario::RealClassification: return run_real(config, true);
        case Scenario::TwoFeatureDemo: return run_demo(config);
        case Scenario::GradCheck: return run_gradcheck(config);
    }
    throw ConfigError("unhandled scenario");
}

void write_outputs(const ExperimentConfig& config, const ScenarioResult& result) {
    std::filesystem::create_directories(config.output_dir);
    const auto write = [&](const std::filesystem::path& path, const std::string& content) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        out << content;
    };
    write(config.output_dir / (result.file_stem + "_trials.jsonl"),
          result.trials_jsonl(iso_timestamp()));
    write(config.output_dir / (result.file_stem + "_summary.csv"), result.summary_csv());
    for (const auto& [name, content] : result.extra_files)
        write(config.output_dir / name, content);
}

int run_experiment(const ExperimentConfig& config) {
    try {
        const ScenarioResult result = run_scenario(config);
        write_outputs(config, result);
        if (!config.quiet) {
            std::cout << result.table();
            if (config.scenario == Scenario::GradCheck)
                std::cout << (result.exit_code == 0 ? "gradient check: PASS\n"
                                                    : "gradient check: FAIL\n");
        }
        return result.exit_code;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const ClusteringError& e) {
        std::cerr << "clustering error: " << e.what() << '\n';
        return 3;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return 4;
    }
}

}  // namespace cglearn
