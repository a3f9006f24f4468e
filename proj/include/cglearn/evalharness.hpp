#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cglearn/common.hpp"
#include "cglearn/lingrad.hpp"
#include "cglearn/synthgen.hpp"

namespace cglearn {

inline constexpr double kSignificanceAlpha = 0.05;

// Two-sided unequal-variance t-test.
struct SignificanceResult {
    double t = 0.0;
    double dof = 0.0;
    double p = 1.0;
    bool significant = false;  // p < kSignificanceAlpha
};

// Welch's t statistic with Welch-Satterthwaite degrees of freedom. Both
// samples need at least two values. When both samples have zero variance the
// test degenerates: equal means give p = 1, unequal means give p = 0 with an
// infinite statistic.
SignificanceResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Maps the fitted weights back to the generative basis through the transpose
// of the orthogonal observation matrix and scores them against the known
// coefficients: first the mean squared deviation from the causal weights,
// then the mean squared weight placed on the effect block (whose ideal
// weight is zero).
std::pair<double, double> coefficient_errors(const LinearModel& model, const GroundTruth& truth);

// Root mean squared residual.
double rmse(const Vector& predictions, const Vector& targets);

struct ClassificationMetrics {
    double accuracy = 0.0;     // percent of exact matches
    double f1_weighted = 0.0;  // support-weighted one-vs-rest F1
    double f1_macro = 0.0;     // unweighted mean over all classes
};

// Scores predicted class indices against integer targets in [0, n_classes).
ClassificationMetrics classification_metrics(const Vector& predicted, const Vector& targets,
                                             int n_classes);

// One record per trial-fold pair.
struct EvalRow {
    int trial = 0;
    int fold = 0;  // index of the held-out test environment
    std::map<std::string, double> values;
};

struct EvalReport {
    std::string method;
    std::vector<std::string> metric_names;
    std::vector<EvalRow> rows;
    // fold-averaged series per metric, one entry per trial
    std::map<std::string, std::vector<double>> per_trial;
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;  // sample std over trials, 0 for a single trial

    // Recomputes per_trial/mean/stddev from rows.
    void aggregate();
    std::string to_json() const;
    std::string to_csv() const;
};

// A method fits a predictor on the training environments. `validation` is the
// environment reserved for hyperparameter selection; methods that have
// nothing to select should clear uses_validation, and the harness then folds
// that environment back into training so every method sees the same rows.
struct EvalMethod {
    std::string name;
    bool uses_validation = true;
    std::function<std::function<Vector(const Matrix&)>(
        const EnvironmentSet& train, const TabularDataset& validation, std::uint64_t seed)>
        fit;
};

struct LoeoConfig {
    int trials = 10;
    std::uint64_t seed = 0;
    bool standardize = true;  // per fold, fitted on the pooled training rows
};

// Rotates the test environment over all m positions; among the remaining
// environments the highest-index one serves as validation. Records train
// metrics on the pooled training rows and test metrics on the held-out
// environment, averages over folds, and repeats per trial seed.
EvalReport leave_one_env_out(const EnvironmentSet& envs, const EvalMethod& method,
                             const LoeoConfig& config);

// Ready-made linear methods. The step size is chosen per fold from the
// spectral bound of the pooled quadratic risk, times step_scale.
struct LinearMethodOptions {
    TrainConfig config;  // learning_rate is overridden per fold
    double step_scale = 1.0;
};

EvalMethod linear_erm_method(const LinearMethodOptions& options);
EvalMethod linear_cglearn_method(const LinearMethodOptions& options);
// The squared penalty is quartic in the weights, so this method additionally
// shrinks the quadratic-stable step by a fixed factor of 0.02.
EvalMethod linear_irmv1_method(const LinearMethodOptions& options, double penalty_weight);

}  // namespace cglearn
