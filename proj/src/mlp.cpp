#include "cglearn/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include <json.hpp>

#include "cglearn/consistency.hpp"

namespace cglearn {
namespace {

Matrix relu(const Matrix& z) { return z.cwiseMax(0.0); }

struct ForwardPass {
    std::vector<Matrix> pre;   // pre[l]: pre-activation of layer l
    std::vector<Matrix> post;  // post[l]: input fed into layer l (post[0] = features)
};

ForwardPass run_forward(const MlpModel& model, const Matrix& features) {
    ForwardPass pass;
    const std::size_t layers = model.layer_weights.size();
    pass.pre.resize(layers);
    pass.post.resize(layers);
    Matrix current = features;
    for (std::size_t l = 0; l < layers; ++l) {
        pass.post[l] = current;
        pass.pre[l] = (current * model.layer_weights[l]).rowwise() +
                      model.layer_biases[l].transpose();
        if (l + 1 < layers) current = relu(pass.pre[l]);
    }
    return pass;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (long i = 0; i < logits.rows(); ++i) {
        const Vector row = logits.row(i).transpose();
        const Vector shifted = (row.array() - row.maxCoeff()).exp();
        out.row(i) = (shifted / shifted.sum()).transpose();
    }
    return out;
}

void check_env_against_model(const MlpModel& model, const TabularDataset& env, MlpLoss loss) {
    if (env.n() == 0) throw std::invalid_argument("empty environment");
    if (env.d() != model.input_width()) {
        throw std::invalid_argument("environment has " + std::to_string(env.d()) +
                                    " features, model expects " +
                                    std::to_string(model.input_width()));
    }
    if (loss == MlpLoss::MSE) {
        if (model.output_head != OutputHead::Linear || env.task != Task::Regression) {
            throw std::invalid_argument("squared loss requires a linear head on regression data");
        }
        if (model.output_width() != 1) {
            throw std::invalid_argument("regression head must have a single output");
        }
    } else {
        if (model.output_head != OutputHead::Softmax || env.task != Task::Classification) {
            throw std::invalid_argument(
                "cross-entropy requires a softmax head on classification data");
        }
        if (model.output_width() != env.n_classes) {
            throw std::invalid_argument("softmax head width " +
                                        std::to_string(model.output_width()) +
                                        " does not match " + std::to_string(env.n_classes) +
                                        " classes");
        }
        for (long i = 0; i < env.n(); ++i) {
            const double t = env.target[i];
            if (t != std::floor(t) || t < 0 || t >= env.n_classes) {
                throw std::invalid_argument("class targets must be integers in [0, n_classes)");
            }
        }
    }
}

double loss_from_logits(const Matrix& logits, const TabularDataset& env, MlpLoss loss) {
    const double n = static_cast<double>(env.n());
    if (loss == MlpLoss::MSE) {
        return (logits.col(0) - env.target).squaredNorm() / n;
    }
    double total = 0.0;
    for (long i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row[static_cast<int>(env.target[i])];
    }
    return total / n;
}

struct BackwardResult {
    MlpGradients grads;
    double loss = 0.0;
};

BackwardResult backward_impl(const MlpModel& model, const TabularDataset& env, MlpLoss loss) {
    check_env_against_model(model, env, loss);
    const ForwardPass pass = run_forward(model, env.features);
    const std::size_t layers = model.layer_weights.size();
    const Matrix& logits = pass.pre.back();
    const double n = static_cast<double>(env.n());

    BackwardResult result;
    result.loss = loss_from_logits(logits, env, loss);
    result.grads.layer_weights.resize(layers);
    result.grads.layer_biases.resize(layers);

    Matrix delta;  // gradient of the mean loss w.r.t. the current pre-activation
    if (loss == MlpLoss::MSE) {
        delta = (2.0 / n) * (logits.col(0) - env.target);
    } else {
        delta = softmax_rows(logits);
        for (long i = 0; i < delta.rows(); ++i) {
            delta(i, static_cast<int>(env.target[i])) -= 1.0;
        }
        delta /= n;
    }

    for (std::size_t l = layers; l-- > 0;) {
        result.grads.layer_weights[l] = pass.post[l].transpose() * delta;
        result.grads.layer_biases[l] = delta.colwise().sum().transpose();
        if (l > 0) {
            const Matrix upstream = delta * model.layer_weights[l].transpose();
            delta = upstream.cwiseProduct((pass.pre[l - 1].array() > 0.0).cast<double>().matrix());
        }
    }
    return result;
}

void check_params_finite(const MlpModel& model, long step) {
    for (const auto& w : model.layer_weights) {
        if (!w.allFinite()) {
            throw TrainingError("training diverged: non-finite parameters at step " +
                                    std::to_string(step),
                                step);
        }
    }
    for (const auto& b : model.layer_biases) {
        if (!b.allFinite()) {
            throw TrainingError("training diverged: non-finite parameters at step " +
                                    std::to_string(step),
                                step);
        }
    }
}

MlpModel train_core(const EnvironmentSet& envs, const MlpTrainConfig& config, bool masking,
                    MlpTrainTrace* trace) {
    envs.validate();
    config.validate();
    if (masking && envs.m() < 2) {
        throw ConfigError("consistency masking needs at least 2 environments, got " +
                          std::to_string(envs.m()));
    }
    const TabularDataset& first = envs.env(0);
    const long m = static_cast<long>(envs.m());
    const long d = first.d();

    MlpModel model = init_mlp(d, config, first.task, first.n_classes);

    for (long step = 0; step < config.steps; ++step) {
        std::vector<MlpGradients> grads;
        grads.reserve(m);
        double pooled_loss = 0.0;
        for (long i = 0; i < m; ++i) {
            BackwardResult r = backward_impl(model, envs.env(i), config.loss);
            pooled_loss += r.loss;
            grads.push_back(std::move(r.grads));
        }
        pooled_loss /= static_cast<double>(m);
        if (!std::isfinite(pooled_loss)) {
            throw TrainingError("training diverged: non-finite loss at step " +
                                    std::to_string(step),
                                step);
        }

        Vector mask = Vector::Ones(d);
        if (masking) {
            const Matrix norms = feature_gradient_norms(grads);
            mask = compute_stats(norms, config.threshold).mask;
        }
        if (trace && config.trace_every > 0 && step % config.trace_every == 0) {
            trace->masks.push_back(mask);
            trace->losses.push_back(pooled_loss);
        }

        MlpGradients mean = grads[0];
        for (long i = 1; i < m; ++i) {
            for (std::size_t l = 0; l < mean.layer_weights.size(); ++l) {
                mean.layer_weights[l] += grads[i].layer_weights[l];
                mean.layer_biases[l] += grads[i].layer_biases[l];
            }
        }
        for (std::size_t l = 0; l < mean.layer_weights.size(); ++l) {
            mean.layer_weights[l] /= static_cast<double>(m);
            mean.layer_biases[l] /= static_cast<double>(m);
        }

        for (long j = 0; j < d; ++j) {
            if (mask[j] == 1.0) {
                model.layer_weights[0].row(j) -=
                    config.learning_rate * mean.layer_weights[0].row(j);
            }
        }
        model.layer_biases[0] -= config.learning_rate * mean.layer_biases[0];
        for (std::size_t l = 1; l < model.layer_weights.size(); ++l) {
            model.layer_weights[l] -= config.learning_rate * mean.layer_weights[l];
            model.layer_biases[l] -= config.learning_rate * mean.layer_biases[l];
        }
    }
    check_params_finite(model, config.steps);

    if (trace) {
        trace->trace_every = config.trace_every;
        trace->final_env_losses.clear();
        for (long i = 0; i < m; ++i) {
            trace->final_env_losses.push_back(mlp_loss(model, envs.env(i), config.loss));
        }
    }
    return model;
}

}  // namespace

void MlpModel::validate() const {
    if (layer_weights.empty()) throw std::invalid_argument("model has no layers");
    if (layer_biases.size() != layer_weights.size()) {
        throw std::invalid_argument("bias/weight layer count mismatch");
    }
    for (std::size_t l = 0; l < layer_weights.size(); ++l) {
        if (layer_biases[l].size() != layer_weights[l].cols()) {
            throw std::invalid_argument("bias width mismatch in layer " + std::to_string(l));
        }
        if (l + 1 < layer_weights.size() &&
            layer_weights[l].cols() != layer_weights[l + 1].rows()) {
            throw std::invalid_argument("incompatible widths between layers " +
                                        std::to_string(l) + " and " + std::to_string(l + 1));
        }
        if (!layer_weights[l].allFinite() || !layer_biases[l].allFinite()) {
            throw std::invalid_argument("non-finite parameters in layer " + std::to_string(l));
        }
    }
}

void MlpTrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be a nonnegative finite value");
    }
    if (steps < 0) throw ConfigError("steps must be nonnegative");
    if (threshold < 0.0) throw ConfigError("threshold must be nonnegative");
    if (trace_every < 0) throw ConfigError("trace_every must be nonnegative");
    for (const int h : hidden_sizes) {
        if (h < 1) throw ConfigError("hidden layer sizes must be positive");
    }
}

MlpModel init_mlp(long d, const MlpTrainConfig& config, Task task, int n_classes) {
    config.validate();
    if (d < 1) throw ConfigError("need at least one input feature");
    const long out = task == Task::Regression ? 1 : n_classes;
    if (out < 1) throw ConfigError("classification init needs n_classes");

    std::vector<long> widths{d};
    for (const int h : config.hidden_sizes) widths.push_back(h);
    widths.push_back(out);

    MlpModel model;
    model.output_head = task == Task::Regression ? OutputHead::Linear : OutputHead::Softmax;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const long fan_in = widths[l];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        auto engine = make_engine(derive_seed(config.seed, static_cast<std::uint64_t>(l)));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        Matrix w(fan_in, widths[l + 1]);
        for (long i = 0; i < w.rows(); ++i) {
            for (long j = 0; j < w.cols(); ++j) w(i, j) = uniform(engine);
        }
        model.layer_weights.push_back(std::move(w));
        model.layer_biases.push_back(Vector::Zero(widths[l + 1]));
    }
    model.validate();
    return model;
}

Matrix forward(const MlpModel& model, const Matrix& features) {
    model.validate();
    if (features.cols() != model.input_width()) {
        throw std::invalid_argument("feature width " + std::to_string(features.cols()) +
                                    " does not match model input " +
                                    std::to_string(model.input_width()));
    }
    const ForwardPass pass = run_forward(model, features);
    if (model.output_head == OutputHead::Softmax) return softmax_rows(pass.pre.back());
    return pass.pre.back();
}

double mlp_loss(const MlpModel& model, const TabularDataset& env, MlpLoss loss) {
    check_env_against_model(model, env, loss);
    const ForwardPass pass = run_forward(model, env.features);
    return loss_from_logits(pass.pre.back(), env, loss);
}

MlpGradients env_backward(const MlpModel& model, const TabularDataset& env, MlpLoss loss) {
    return backward_impl(model, env, loss).grads;
}

Matrix feature_gradient_norms(const std::vector<MlpGradients>& per_env) {
    if (per_env.empty()) throw std::invalid_argument("no per-environment gradients");
    const Matrix& first = per_env.front().layer_weights.at(0);
    Matrix norms(static_cast<long>(per_env.size()), first.rows());
    for (std::size_t i = 0; i < per_env.size(); ++i) {
        const Matrix& g = per_env[i].layer_weights.at(0);
        if (g.rows() != first.rows() || g.cols() != first.cols()) {
            throw std::invalid_argument("first-layer gradient shapes differ across environments");
        }
        norms.row(static_cast<long>(i)) = g.rowwise().norm().transpose();
    }
    return norms;
}

std::pair<MlpModel, MlpTrainTrace> train_mlp_cglearn(const EnvironmentSet& envs,
                                                     const MlpTrainConfig& config) {
    MlpTrainTrace trace;
    MlpModel model = train_core(envs, config, /*masking=*/true, &trace);
    return {std::move(model), std::move(trace)};
}

MlpModel train_mlp_erm(const EnvironmentSet& envs, const MlpTrainConfig& config) {
    return train_core(envs, config, /*masking=*/false, nullptr);
}

std::pair<double, MlpModel> select_mlp_threshold(const EnvironmentSet& train_envs,
                                                 const TabularDataset& validation_env,
                                                 const MlpTrainConfig& config) {
    if (config.threshold_candidates.empty()) {
        throw ConfigError("threshold_candidates must be nonempty");
    }
    double best_threshold = 0.0;
    double best_loss = std::numeric_limits<double>::infinity();
    MlpModel best_model;
    for (const double candidate : config.threshold_candidates) {
        MlpTrainConfig candidate_config = config;
        candidate_config.threshold = candidate;
        candidate_config.trace_every = 0;
        MlpModel model = train_core(train_envs, candidate_config, /*masking=*/true, nullptr);
        const double loss = mlp_loss(model, validation_env, config.loss);
        const bool better =
            loss < best_loss || (loss == best_loss && candidate < best_threshold);
        if (better) {
            best_threshold = candidate;
            best_loss = loss;
            best_model = std::move(model);
        }
    }
    return {best_threshold, std::move(best_model)};
}

std::string MlpModel::to_json() const {
    validate();
    nlohmann::json j;
    j["hidden_activation"] = "relu";
    j["output_head"] = output_head == OutputHead::Linear ? "linear" : "softmax";
    j["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < layer_weights.size(); ++l) {
        const Matrix& w = layer_weights[l];
        nlohmann::json layer;
        layer["rows"] = w.rows();
        layer["cols"] = w.cols();
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(w.size()));
        for (long i = 0; i < w.rows(); ++i) {
            for (long jj = 0; jj < w.cols(); ++jj) flat.push_back(w(i, jj));
        }
        layer["weights"] = flat;
        layer["biases"] = std::vector<double>(layer_biases[l].data(),
                                              layer_biases[l].data() + layer_biases[l].size());
        j["layers"].push_back(std::move(layer));
    }
    return j.dump(2) + "\n";
}

MlpModel MlpModel::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& err) {
        throw DataError(std::string("invalid model document: ") + err.what());
    }
    MlpModel model;
    try {
        if (j.at("hidden_activation").get<std::string>() != "relu") {
            throw DataError("invalid model document: unknown activation");
        }
        const std::string head = j.at("output_head").get<std::string>();
        if (head == "linear") {
            model.output_head = OutputHead::Linear;
        } else if (head == "softmax") {
            model.output_head = OutputHead::Softmax;
        } else {
            throw DataError("invalid model document: unknown output head '" + head + "'");
        }
        for (const auto& layer : j.at("layers")) {
            const long rows = layer.at("rows").get<long>();
            const long cols = layer.at("cols").get<long>();
            const auto flat = layer.at("weights").get<std::vector<double>>();
            const auto biases = layer.at("biases").get<std::vector<double>>();
            if (static_cast<long>(flat.size()) != rows * cols ||
                static_cast<long>(biases.size()) != cols) {
                throw DataError("invalid model document: layer size mismatch");
            }
            Matrix w(rows, cols);
            for (long i = 0; i < rows; ++i) {
                for (long jj = 0; jj < cols; ++jj) {
                    w(i, jj) = flat[static_cast<std::size_t>(i * cols + jj)];
                }
            }
            model.layer_weights.push_back(std::move(w));
            model.layer_biases.push_back(
                Eigen::Map<const Vector>(biases.data(), static_cast<long>(biases.size())));
        }
    } catch (const nlohmann::json::exception& err) {
        throw DataError(std::string("invalid model document: ") + err.what());
    }
    try {
        model.validate();
    } catch (const std::invalid_argument& err) {
        throw DataError(std::string("invalid model document: ") + err.what());
    }
    return model;
}

}  // namespace cglearn
