#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cglearn/common.hpp"

namespace cglearn {

enum class HiddenActivation { ReLU };
enum class OutputHead { Linear, Softmax };
enum class MlpLoss { MSE, CrossEntropy };

struct MlpModel {
    std::vector<Matrix> layer_weights;  // layer_weights[0] is d x h1
    std::vector<Vector> layer_biases;
    HiddenActivation hidden_activation = HiddenActivation::ReLU;
    OutputHead output_head = OutputHead::Linear;

    long input_width() const { return layer_weights.empty() ? 0 : layer_weights.front().rows(); }
    long output_width() const { return layer_weights.empty() ? 0 : layer_weights.back().cols(); }
    void validate() const;

    // Flat JSON document: layer sizes plus row-major weight arrays.
    std::string to_json() const;
    static MlpModel from_json(const std::string& text);
};

struct MlpTrainConfig {
    std::vector<int> hidden_sizes{64, 32};
    double learning_rate = 1e-2;
    long steps = 2000;
    double threshold = 1.0;
    std::vector<double> threshold_candidates{0.25, 1.0, 4.0, 16.0, 64.0};
    MlpLoss loss = MlpLoss::MSE;
    std::uint64_t seed = 0;
    long trace_every = 0;  // 0 disables tracing
    void validate() const;
};

// Gradients laid out exactly like the model parameters.
struct MlpGradients {
    std::vector<Matrix> layer_weights;
    std::vector<Vector> layer_biases;
};

// Seeded uniform init in +-1/sqrt(fan_in); biases zero. The output head and
// width follow the task (Linear/1 for regression, Softmax/n_classes for
// classification).
MlpModel init_mlp(long d, const MlpTrainConfig& config, Task task, int n_classes = 0);

// Feed-forward pass; Softmax head returns per-row class probabilities.
Matrix forward(const MlpModel& model, const Matrix& features);

// Mean loss of the model on one environment.
double mlp_loss(const MlpModel& model, const TabularDataset& env, MlpLoss loss);

// Analytic full-batch gradients of the mean loss on one environment.
MlpGradients env_backward(const MlpModel& model, const TabularDataset& env, MlpLoss loss);

// Entry (i, j): L2-norm of the first-layer gradient row of input feature j in
// environment i.
Matrix feature_gradient_norms(const std::vector<MlpGradients>& per_env);

struct MlpTrainTrace {
    // feature masks and pooled losses at steps 0, k, 2k, ... when trace_every = k
    std::vector<Vector> masks;
    std::vector<double> losses;
    long trace_every = 0;
    std::vector<double> final_env_losses;
};

// Per step: per-environment backward passes, consistency statistics over the
// first-layer feature gradient norms, then a pooled-mean update where a
// first-layer row moves only when its feature mask is 1. First-layer biases
// and all deeper layers always take the pooled-mean step.
std::pair<MlpModel, MlpTrainTrace> train_mlp_cglearn(const EnvironmentSet& envs,
                                                     const MlpTrainConfig& config);

// Pooled-mean gradient descent on all parameters; shares the cglearn code
// path with masking disabled, so a zero threshold reproduces it exactly.
MlpModel train_mlp_erm(const EnvironmentSet& envs, const MlpTrainConfig& config);

// Trains one model per candidate threshold, picks the smallest validation
// loss (ties toward the smaller threshold).
std::pair<double, MlpModel> select_mlp_threshold(const EnvironmentSet& train_envs,
                                                 const TabularDataset& validation_env,
                                                 const MlpTrainConfig& config);

}  // namespace cglearn
