#include "cglearn/lingrad.hpp"

#include <cmath>

namespace cglearn {

namespace {

// Per-environment second moments in the intercept-extended basis. The MSE
// gradient is linear in these, so training never has to revisit the rows:
// g = 2(A w_ext - v) reproduces the full-batch gradient exactly.
struct EnvMoments {
    Matrix a;   // (d+1) x (d+1)
    Vector v;   // (d+1)
    double yy;  // mean of y^2
};

EnvMoments moments_of(const TabularDataset& env) {
    const Eigen::Index n = env.n();
    const Eigen::Index d = env.d();
    Matrix ext(n, d + 1);
    ext.leftCols(d) = env.features;
    ext.col(d).setOnes();
    EnvMoments mo;
    mo.a = ext.transpose() * ext / static_cast<double>(n);
    mo.v = ext.transpose() * env.target / static_cast<double>(n);
    mo.yy = env.target.squaredNorm() / static_cast<double>(n);
    return mo;
}

std::vector<EnvMoments> moments_of(const EnvironmentSet& envs) {
    std::vector<EnvMoments> mos;
    mos.reserve(envs.m());
    for (const auto& env : envs.environments) mos.push_back(moments_of(env));
    return mos;
}

double mse_of(const EnvMoments& mo, const Vector& w_ext) {
    return w_ext.dot(mo.a * w_ext) - 2.0 * mo.v.dot(w_ext) + mo.yy;
}

void check_regression(const EnvironmentSet& envs) {
    envs.validate();
    for (const auto& env : envs.environments)
        if (env.task != Task::Regression)
            throw std::invalid_argument("linear trainers handle regression only");
}

void fill_gradients(const std::vector<EnvMoments>& mos, const Vector& w_ext,
                    Matrix& grads) {
    for (std::size_t i = 0; i < mos.size(); ++i)
        grads.row(i) = 2.0 * (mos[i].a * w_ext - mos[i].v);
}

LinearModel model_of(const Vector& w_ext) {
    LinearModel model;
    const Eigen::Index d = w_ext.size() - 1;
    model.weights = w_ext.head(d);
    model.bias = w_ext[d];
    return model;
}

void check_finite(const Vector& w_ext, long step) {
    if (!w_ext.allFinite())
        throw TrainingError(
            "training diverged: non-finite loss at step " + std::to_string(step),
            step);
}

}  // namespace

void TrainConfig::validate() const {
    // zero is allowed: a no-op trainer is well defined and useful in tests
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be a nonnegative finite value");
    if (steps < 1) throw ConfigError("steps must be at least 1");
    if (threshold < 0.0) throw ConfigError("threshold must be nonnegative");
    if (trace_every < 0) throw ConfigError("trace_every must be nonnegative");
}

Matrix env_gradients(const LinearModel& model, const EnvironmentSet& envs) {
    check_regression(envs);
    const Eigen::Index d = envs.env(0).d();
    if (model.weights.size() != d)
        throw std::invalid_argument("model width does not match environments");

    Matrix grads(static_cast<Eigen::Index>(envs.m()), d + 1);
    for (std::size_t i = 0; i < envs.m(); ++i) {
        const auto& env = envs.env(i);
        const double inv_n = 1.0 / static_cast<double>(env.n());
        const Vector resid = model.predict(env.features) - env.target;
        grads.row(i).head(d) = 2.0 * inv_n * (env.features.transpose() * resid);
        grads(static_cast<Eigen::Index>(i), d) = 2.0 * inv_n * resid.sum();
    }
    return grads;
}

LinearModel train_erm(const EnvironmentSet& envs, const TrainConfig& config) {
    check_regression(envs);
    config.validate();
    const auto mos = moments_of(envs);
    const Eigen::Index width = envs.env(0).d() + 1;

    Vector w_ext = Vector::Zero(width);
    Matrix grads(static_cast<Eigen::Index>(mos.size()), width);
    for (long step = 0; step < config.steps; ++step) {
        fill_gradients(mos, w_ext, grads);
        const Vector mu = grads.colwise().mean();
        w_ext -= config.learning_rate * mu;
        check_finite(w_ext, step);
    }
    return model_of(w_ext);
}

std::pair<LinearModel, TrainTrace> train_cglearn(const EnvironmentSet& envs,
                                                 const TrainConfig& config) {
    check_regression(envs);
    config.validate();
    if (envs.m() < 2)
        throw std::invalid_argument(
            "consistency masking needs at least two environments");
    const auto mos = moments_of(envs);
    const Eigen::Index width = envs.env(0).d() + 1;

    TrainTrace trace;
    trace.trace_every = config.trace_every;

    Vector w_ext = Vector::Zero(width);
    Matrix grads(static_cast<Eigen::Index>(mos.size()), width);
    for (long step = 0; step < config.steps; ++step) {
        fill_gradients(mos, w_ext, grads);
        ConsistencyStats stats = compute_stats(grads, config.threshold);
        stats.mask[width - 1] = 1.0;  // the bias is always updated
        if (config.trace_every > 0 && step % config.trace_every == 0)
            trace.masks.push_back(stats.mask.head(width - 1));
        w_ext -= config.learning_rate * (stats.mu.array() * stats.mask.array()).matrix();
        check_finite(w_ext, step);
    }

    trace.final_model = model_of(w_ext);
    trace.final_env_losses.resize(static_cast<Eigen::Index>(mos.size()));
    for (std::size_t i = 0; i < mos.size(); ++i)
        trace.final_env_losses[static_cast<Eigen::Index>(i)] = mse_of(mos[i], w_ext);
    return {trace.final_model, std::move(trace)};
}

LinearModel train_irmv1(const EnvironmentSet& envs, const TrainConfig& config,
                        double penalty_weight) {
    check_regression(envs);
    config.validate();
    if (envs.m() < 2)
        throw std::invalid_argument("the IRMv1 penalty needs at least two environments");
    if (penalty_weight < 0.0)
        throw std::invalid_argument("penalty_weight must be nonnegative");
    const auto mos = moments_of(envs);
    const Eigen::Index width = envs.env(0).d() + 1;
    const double scale = 1.0 / std::max(1.0, penalty_weight);

    Vector w_ext = Vector::Zero(width);
    Matrix grads(static_cast<Eigen::Index>(mos.size()), width);
    for (long step = 0; step < config.steps; ++step) {
        for (std::size_t i = 0; i < mos.size(); ++i) {
            const Vector aw = mos[i].a * w_ext;
            const Vector risk_grad = 2.0 * (aw - mos[i].v);
            // d/ds risk(s*f) at s=1 equals 2(E[f^2] - E[fy])
            const double ge = 2.0 * (w_ext.dot(aw) - mos[i].v.dot(w_ext));
            grads.row(i) =
                risk_grad + penalty_weight * (4.0 * ge) * (2.0 * aw - mos[i].v);
        }
        const Vector mu = grads.colwise().mean();
        w_ext -= config.learning_rate * scale * mu;
        check_finite(w_ext, step);
    }
    return model_of(w_ext);
}

std::pair<double, LinearModel> select_threshold(const EnvironmentSet& train_envs,
                                                const TabularDataset& validation_env,
                                                const TrainConfig& config) {
    if (config.threshold_candidates.empty())
        throw ConfigError("threshold candidate list is empty");
    validation_env.validate();
    const EnvMoments val = moments_of(validation_env);

    double best_threshold = 0.0;
    double best_mse = 0.0;
    LinearModel best_model;
    bool have_best = false;
    for (double candidate : config.threshold_candidates) {
        TrainConfig candidate_config = config;
        candidate_config.threshold = candidate;
        candidate_config.trace_every = 0;
        auto [model, trace] = train_cglearn(train_envs, candidate_config);

        Vector w_ext(model.weights.size() + 1);
        w_ext << model.weights, model.bias;
        const double val_mse = mse_of(val, w_ext);

        const bool better =
            !have_best || val_mse < best_mse ||
            (val_mse == best_mse && candidate < best_threshold);
        if (better) {
            best_threshold = candidate;
            best_mse = val_mse;
            best_model = std::move(model);
            have_best = true;
        }
    }
    return {best_threshold, std::move(best_model)};
}

double mse(const LinearModel& model, const TabularDataset& env) {
    env.validate();
    if (model.weights.size() != env.d())
        throw std::invalid_argument("model width does not match dataset");
    const Vector resid = model.predict(env.features) - env.target;
    return resid.squaredNorm() / static_cast<double>(env.n());
}

double stable_learning_rate(const EnvironmentSet& envs) {
    check_regression(envs);
    const auto mos = moments_of(envs);
    Matrix pooled = Matrix::Zero(mos[0].a.rows(), mos[0].a.cols());
    for (const auto& mo : mos) pooled += mo.a;
    pooled /= static_cast<double>(mos.size());

    Eigen::SelfAdjointEigenSolver<Matrix> eig(2.0 * pooled,
                                              Eigen::EigenvaluesOnly);
    const double lambda_max = eig.eigenvalues().maxCoeff();
    if (!(lambda_max > 0.0))
        throw std::invalid_argument("degenerate data: non-positive curvature");
    return 0.5 / lambda_max;
}

}  // namespace cglearn
