#pragma once

#include "cglearn/common.hpp"
#include "cglearn/consistency.hpp"

#include <utility>

namespace cglearn {

struct LinearModel {
    Vector weights;
    double bias = 0.0;

    Vector predict(const Matrix& features) const {
        return (features * weights).array() + bias;
    }
};

enum class LinLoss { MSE };

struct TrainConfig {
    double learning_rate = 1e-2;
    long steps = 5000;
    // "threshold" drives train_cglearn; the candidate list drives
    // select_threshold.
    double threshold = 1.0;
    std::vector<double> threshold_candidates{0.25, 1.0, 4.0, 16.0, 64.0};
    LinLoss loss = LinLoss::MSE;
    // record the feature mask every trace_every steps (0 disables)
    long trace_every = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainTrace {
    // feature masks captured at steps 0, k, 2k, ... < steps
    std::vector<Vector> masks;
    long trace_every = 0;
    LinearModel final_model;
    Vector final_env_losses;
};

// Full-batch MSE gradients, one row per environment; the last column is the
// bias derivative.
Matrix env_gradients(const LinearModel& model, const EnvironmentSet& envs);

LinearModel train_erm(const EnvironmentSet& envs, const TrainConfig& config);

std::pair<LinearModel, TrainTrace> train_cglearn(const EnvironmentSet& envs,
                                                 const TrainConfig& config);

// IRMv1-style penalty: mean over environments of risk_e plus
// penalty_weight times the squared derivative of risk_e(s * f) at s = 1.
// The objective is scaled by 1/max(1, penalty_weight) so huge penalties
// keep a usable step size.
LinearModel train_irmv1(const EnvironmentSet& envs, const TrainConfig& config,
                        double penalty_weight);

// Trains one CGLearn model per candidate on train_envs, picks the smallest
// validation MSE (ties toward the smaller threshold).
std::pair<double, LinearModel> select_threshold(const EnvironmentSet& train_envs,
                                                const TabularDataset& validation_env,
                                                const TrainConfig& config);

// Mean squared error of the model on one dataset.
double mse(const LinearModel& model, const TabularDataset& env);

// Step size guaranteed stable for gradient descent on the pooled quadratic:
// 0.5 / lambda_max of the pooled extended Hessian. Scenario configs use this
// in place of the fixed default.
double stable_learning_rate(const EnvironmentSet& envs);

}  // namespace cglearn
