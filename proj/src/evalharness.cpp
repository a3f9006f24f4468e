#include "cglearn/evalharness.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cglearn/data_io.hpp"

namespace cglearn {
namespace {

double sample_mean(const std::vector<double>& v) {
    double sum = 0.0;
    for (const double x : v) sum += x;
    return sum / static_cast<double>(v.size());
}

double sample_variance(const std::vector<double>& v, double mean) {
    double sum = 0.0;
    for (const double x : v) sum += (x - mean) * (x - mean);
    return sum / static_cast<double>(v.size() - 1);
}

}  // namespace

SignificanceResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw std::invalid_argument("welch_ttest needs at least two values per sample");
    }
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double ma = sample_mean(a);
    const double mb = sample_mean(b);
    const double sa = sample_variance(a, ma) / na;
    const double sb = sample_variance(b, mb) / nb;

    SignificanceResult out;
    if (sa + sb == 0.0) {
        out.dof = na + nb - 2.0;
        if (ma == mb) {
            out.t = 0.0;
            out.p = 1.0;
        } else {
            out.t = std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
            out.p = 0.0;
        }
        out.significant = out.p < kSignificanceAlpha;
        return out;
    }

    out.t = (ma - mb) / std::sqrt(sa + sb);
    out.dof = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    const boost::math::students_t_distribution<double> dist(out.dof);
    out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
    out.significant = out.p < kSignificanceAlpha;
    return out;
}

std::pair<double, double> coefficient_errors(const LinearModel& model, const GroundTruth& truth) {
    const long d = truth.scramble.rows();
    if (model.weights.size() != d) {
        throw std::invalid_argument("model has " + std::to_string(model.weights.size()) +
                                    " weights but the generative basis has " + std::to_string(d));
    }
    const long d_causal = truth.w_causal.size();
    if (d_causal > d) {
        throw std::invalid_argument("causal block wider than the generative basis");
    }
    const Vector w_gen = truth.scramble.transpose() * model.weights;
    const double causal = (w_gen.head(d_causal) - truth.w_causal).squaredNorm() /
                          static_cast<double>(d_causal);
    const long d_effect = d - d_causal;
    const double noncausal =
        d_effect > 0 ? w_gen.tail(d_effect).squaredNorm() / static_cast<double>(d_effect) : 0.0;
    return {causal, noncausal};
}

double rmse(const Vector& predictions, const Vector& targets) {
    if (predictions.size() != targets.size()) {
        throw std::invalid_argument("prediction/target length mismatch");
    }
    if (predictions.size() == 0) throw std::invalid_argument("empty prediction vector");
    return std::sqrt((predictions - targets).squaredNorm() /
                     static_cast<double>(predictions.size()));
}

ClassificationMetrics classification_metrics(const Vector& predicted, const Vector& targets,
                                             int n_classes) {
    if (predicted.size() != targets.size()) {
        throw std::invalid_argument("prediction/target length mismatch");
    }
    if (predicted.size() == 0) throw std::invalid_argument("empty prediction vector");
    if (n_classes < 2) throw std::invalid_argument("need at least two classes");

    const long n = predicted.size();
    std::vector<long> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0), support(n_classes, 0);
    long correct = 0;
    for (long i = 0; i < n; ++i) {
        const double pv = predicted[i];
        const double tv = targets[i];
        if (pv != std::floor(pv) || pv < 0 || pv >= n_classes || tv != std::floor(tv) || tv < 0 ||
            tv >= n_classes) {
            throw std::invalid_argument("class values must be integers in [0, n_classes)");
        }
        const int p = static_cast<int>(pv);
        const int t = static_cast<int>(tv);
        ++support[t];
        if (p == t) {
            ++correct;
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }

    ClassificationMetrics out;
    out.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    double weighted = 0.0;
    double macro = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        const double denom_p = static_cast<double>(tp[c] + fp[c]);
        const double denom_r = static_cast<double>(tp[c] + fn[c]);
        const double precision = denom_p > 0 ? tp[c] / denom_p : 0.0;
        const double recall = denom_r > 0 ? tp[c] / denom_r : 0.0;
        const double f1 =
            precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        weighted += f1 * static_cast<double>(support[c]);
        macro += f1;
    }
    out.f1_weighted = weighted / static_cast<double>(n);
    out.f1_macro = macro / static_cast<double>(n_classes);
    return out;
}

void EvalReport::aggregate() {
    per_trial.clear();
    mean.clear();
    stddev.clear();

    std::map<int, std::vector<const EvalRow*>> by_trial;
    for (const auto& row : rows) by_trial[row.trial].push_back(&row);

    for (const auto& name : metric_names) {
        std::vector<double> series;
        series.reserve(by_trial.size());
        for (const auto& [trial, trial_rows] : by_trial) {
            double sum = 0.0;
            for (const auto* row : trial_rows) {
                const auto it = row->values.find(name);
                if (it == row->values.end()) {
                    throw std::invalid_argument("row missing metric '" + name + "'");
                }
                sum += it->second;
            }
            series.push_back(sum / static_cast<double>(trial_rows.size()));
        }
        const double m = series.empty() ? 0.0 : sample_mean(series);
        mean[name] = m;
        stddev[name] = series.size() > 1 ? std::sqrt(sample_variance(series, m)) : 0.0;
        per_trial[name] = std::move(series);
    }
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["metrics"] = metric_names;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : rows) {
        j["rows"].push_back({{"trial", row.trial}, {"fold", row.fold}, {"values", row.values}});
    }
    j["per_trial"] = per_trial;
    j["mean"] = mean;
    j["stddev"] = stddev;
    return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << "trial,fold";
    for (const auto& name : metric_names) out << ',' << name;
    out << '\n';
    for (const auto& row : rows) {
        out << row.trial << ',' << row.fold;
        for (const auto& name : metric_names) out << ',' << format_double(row.values.at(name));
        out << '\n';
    }
    return out.str();
}

EvalReport leave_one_env_out(const EnvironmentSet& envs, const EvalMethod& method,
                             const LoeoConfig& config) {
    envs.validate();
    const int m = static_cast<int>(envs.m());
    if (m < 3) {
        throw ConfigError("leave-one-environment-out needs at least 3 environments, got " +
                          std::to_string(m));
    }
    if (config.trials < 1) throw ConfigError("trials must be positive");
    if (!method.fit) throw ConfigError("method '" + method.name + "' has no fit function");

    const Task task = envs.env(0).task;
    const int n_classes = envs.env(0).n_classes;

    EvalReport report;
    report.method = method.name;
    report.metric_names =
        task == Task::Regression
            ? std::vector<std::string>{"rmse_train", "rmse_test"}
            : std::vector<std::string>{"accuracy_train", "accuracy_test", "f1_train",
                                       "f1_test",        "f1_macro_train", "f1_macro_test"};

    for (int trial = 0; trial < config.trials; ++trial) {
        const std::uint64_t trial_seed = derive_seed(config.seed, static_cast<std::uint64_t>(trial));
        for (int test_index = 0; test_index < m; ++test_index) {
            int val_index = -1;
            for (int i = m - 1; i >= 0; --i) {
                if (i != test_index) {
                    val_index = i;
                    break;
                }
            }

            EnvironmentSet train;
            for (int i = 0; i < m; ++i) {
                if (i == test_index) continue;
                if (i == val_index && method.uses_validation) continue;
                train.environments.push_back(envs.env(i));
            }
            TabularDataset validation = envs.env(val_index);
            TabularDataset test = envs.env(test_index);

            if (config.standardize) {
                const Standardizer scaler = fit_standardizer(train, /*eps_guard=*/true);
                for (auto& env : train.environments) env = scaler.transform(env);
                validation = scaler.transform(validation);
                test = scaler.transform(test);
            }

            const auto predictor =
                method.fit(train, validation, derive_seed(trial_seed, test_index));

            long train_rows = 0;
            for (const auto& env : train.environments) train_rows += env.n();
            Matrix pooled_x(train_rows, train.env(0).d());
            Vector pooled_y(train_rows);
            long offset = 0;
            for (const auto& env : train.environments) {
                pooled_x.middleRows(offset, env.n()) = env.features;
                pooled_y.segment(offset, env.n()) = env.target;
                offset += env.n();
            }

            EvalRow row;
            row.trial = trial;
            row.fold = test_index;
            if (task == Task::Regression) {
                row.values["rmse_train"] = rmse(predictor(pooled_x), pooled_y);
                row.values["rmse_test"] = rmse(predictor(test.features), test.target);
            } else {
                const ClassificationMetrics on_train =
                    classification_metrics(predictor(pooled_x), pooled_y, n_classes);
                const ClassificationMetrics on_test =
                    classification_metrics(predictor(test.features), test.target, n_classes);
                row.values["accuracy_train"] = on_train.accuracy;
                row.values["accuracy_test"] = on_test.accuracy;
                row.values["f1_train"] = on_train.f1_weighted;
                row.values["f1_test"] = on_test.f1_weighted;
                row.values["f1_macro_train"] = on_train.f1_macro;
                row.values["f1_macro_test"] = on_test.f1_macro;
            }
            report.rows.push_back(std::move(row));
        }
    }
    report.aggregate();
    return report;
}

namespace {

std::function<Vector(const Matrix&)> wrap(const LinearModel& model) {
    return [model](const Matrix& x) { return model.predict(x); };
}

}  // namespace

EvalMethod linear_erm_method(const LinearMethodOptions& options) {
    EvalMethod method;
    method.name = "erm";
    method.uses_validation = false;
    method.fit = [options](const EnvironmentSet& train, const TabularDataset&, std::uint64_t) {
        TrainConfig config = options.config;
        config.learning_rate = stable_learning_rate(train) * options.step_scale;
        return wrap(train_erm(train, config));
    };
    return method;
}

EvalMethod linear_cglearn_method(const LinearMethodOptions& options) {
    EvalMethod method;
    method.name = "cglearn";
    method.uses_validation = true;
    method.fit = [options](const EnvironmentSet& train, const TabularDataset& validation,
                           std::uint64_t) {
        TrainConfig config = options.config;
        config.learning_rate = stable_learning_rate(train) * options.step_scale;
        return wrap(select_threshold(train, validation, config).second);
    };
    return method;
}

EvalMethod linear_irmv1_method(const LinearMethodOptions& options, double penalty_weight) {
    EvalMethod method;
    method.name = "irmv1";
    method.uses_validation = false;
    method.fit = [options, penalty_weight](const EnvironmentSet& train, const TabularDataset&,
                                           std::uint64_t) {
        TrainConfig config = options.config;
        // the quartic penalty has no global curvature bound, so the spectral
        // step can still overshoot; back off until the run stays finite
        config.learning_rate = stable_learning_rate(train) * options.step_scale * 0.02;
        for (int attempt = 0;; ++attempt) {
            try {
                return wrap(train_irmv1(train, config, penalty_weight));
            } catch (const TrainingError&) {
                if (attempt >= 6) throw;
                config.learning_rate *= 0.25;
            }
        }
    };
    return method;
}

}  // namespace cglearn
