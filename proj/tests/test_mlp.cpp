#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cglearn/consistency.hpp"
#include "cglearn/mlp.hpp"
#include "cglearn/synthgen.hpp"

using namespace cglearn;

namespace {

bool close(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

TabularDataset regression_env(long n, long d, std::uint64_t seed) {
    auto engine = make_engine(seed);
    std::normal_distribution<double> normal;
    TabularDataset env;
    env.features.resize(n, d);
    for (long i = 0; i < n; ++i) {
        for (long j = 0; j < d; ++j) env.features(i, j) = normal(engine);
    }
    env.target = env.features.col(0);
    env.task = Task::Regression;
    return env;
}

TabularDataset blob_env(long n, std::uint64_t seed) {
    auto engine = make_engine(seed);
    std::normal_distribution<double> normal;
    TabularDataset env;
    env.features.resize(n, 2);
    env.target.resize(n);
    env.task = Task::Classification;
    env.n_classes = 2;
    env.class_values = {0.0, 1.0};
    for (long i = 0; i < n; ++i) {
        const int label = i % 2;
        const double center = label == 0 ? -1.5 : 1.5;
        env.features(i, 0) = center + normal(engine);
        env.features(i, 1) = center + normal(engine);
        env.target[i] = label;
    }
    return env;
}

bool bitwise_equal(const MlpModel& a, const MlpModel& b) {
    if (a.layer_weights.size() != b.layer_weights.size()) return false;
    for (std::size_t l = 0; l < a.layer_weights.size(); ++l) {
        if (a.layer_weights[l] != b.layer_weights[l]) return false;
        if (a.layer_biases[l] != b.layer_biases[l]) return false;
    }
    return a.output_head == b.output_head;
}

double min_hidden_preactivation(const MlpModel& model, const Matrix& features) {
    // replays the forward pass to find the smallest |pre-activation| of any
    // hidden unit, so finite-difference probes can stay away from ReLU kinks
    Matrix current = features;
    double smallest = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < model.layer_weights.size(); ++l) {
        const Matrix z =
            (current * model.layer_weights[l]).rowwise() + model.layer_biases[l].transpose();
        smallest = std::min(smallest, z.cwiseAbs().minCoeff());
        current = z.cwiseMax(0.0);
    }
    return smallest;
}

}  // namespace

TEST_CASE("forward pass basics") {
    SUBCASE("all-zero weights with a linear head predict zero") {
        MlpModel model;
        model.layer_weights = {Matrix::Zero(3, 2), Matrix::Zero(2, 1)};
        model.layer_biases = {Vector::Zero(2), Vector::Zero(1)};
        const Matrix out = forward(model, Matrix::Random(5, 3));
        CHECK(out.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("hand-computed single-unit composition") {
        MlpModel model;
        model.layer_weights = {Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 3.0)};
        model.layer_biases = {Vector::Constant(1, -1.0), Vector::Constant(1, 0.5)};
        Matrix x(2, 1);
        x << 2.0, 0.0;
        const Matrix out = forward(model, x);
        // x=2: relu(2*2-1)=3 -> 3*3+0.5 = 9.5; x=0: relu(-1)=0 -> 0.5
        CHECK(out(0, 0) == 9.5);
        CHECK(out(1, 0) == 0.5);
    }
    SUBCASE("softmax rows sum to one") {
        MlpTrainConfig config;
        config.hidden_sizes = {6};
        config.seed = 12;
        const MlpModel model = init_mlp(4, config, Task::Classification, 3);
        const Matrix probs = forward(model, Matrix::Random(20, 4) * 10.0);
        for (long i = 0; i < probs.rows(); ++i) {
            CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-9);
            CHECK(probs.row(i).minCoeff() >= 0.0);
        }
    }
    SUBCASE("feature width must match") {
        MlpTrainConfig config;
        const MlpModel model = init_mlp(3, config, Task::Regression);
        CHECK_THROWS_AS(forward(model, Matrix::Random(4, 2)), std::invalid_argument);
    }
}

TEST_CASE("backward pass matches central finite differences") {
    std::mt19937_64 engine(4242);
    std::uniform_int_distribution<long> d_dist(1, 4), h_dist(1, 5), n_dist(3, 20), k_dist(2, 4);
    std::normal_distribution<double> normal;
    const double fd_step = 1e-5;

    int done = 0;
    std::uint64_t attempt = 0;
    while (done < 10) {
        ++attempt;
        const long d = d_dist(engine);
        const long n = n_dist(engine);
        const bool classify = done % 2 == 1;
        const bool two_hidden = done >= 8;

        MlpTrainConfig config;
        config.hidden_sizes = {static_cast<int>(h_dist(engine))};
        if (two_hidden) config.hidden_sizes.push_back(static_cast<int>(h_dist(engine)));
        config.seed = attempt * 977;

        TabularDataset env;
        env.features.resize(n, d);
        for (long i = 0; i < n; ++i) {
            for (long j = 0; j < d; ++j) env.features(i, j) = normal(engine);
        }
        env.target.resize(n);
        MlpLoss loss;
        int n_classes = 0;
        if (classify) {
            n_classes = static_cast<int>(k_dist(engine));
            env.task = Task::Classification;
            env.n_classes = n_classes;
            std::uniform_int_distribution<int> label(0, n_classes - 1);
            for (long i = 0; i < n; ++i) env.target[i] = label(engine);
            loss = MlpLoss::CrossEntropy;
        } else {
            env.task = Task::Regression;
            for (long i = 0; i < n; ++i) env.target[i] = normal(engine);
            loss = MlpLoss::MSE;
        }

        MlpModel model = init_mlp(d, config, env.task, n_classes);
        for (auto& b : model.layer_biases) {
            for (long i = 0; i < b.size(); ++i) b[i] = 0.3 * normal(engine);
        }
        // keep every hidden unit away from its kink so the loss is smooth
        // within the probe radius
        if (min_hidden_preactivation(model, env.features) < 1e-3) continue;

        const MlpGradients analytic = env_backward(model, env, loss);
        for (std::size_t l = 0; l < model.layer_weights.size(); ++l) {
            for (long i = 0; i < model.layer_weights[l].rows(); ++i) {
                for (long j = 0; j < model.layer_weights[l].cols(); ++j) {
                    MlpModel plus = model, minus = model;
                    plus.layer_weights[l](i, j) += fd_step;
                    minus.layer_weights[l](i, j) -= fd_step;
                    const double fd =
                        (mlp_loss(plus, env, loss) - mlp_loss(minus, env, loss)) / (2 * fd_step);
                    CHECK(close(analytic.layer_weights[l](i, j), fd, 1e-4));
                }
            }
            for (long i = 0; i < model.layer_biases[l].size(); ++i) {
                MlpModel plus = model, minus = model;
                plus.layer_biases[l][i] += fd_step;
                minus.layer_biases[l][i] -= fd_step;
                const double fd =
                    (mlp_loss(plus, env, loss) - mlp_loss(minus, env, loss)) / (2 * fd_step);
                CHECK(close(analytic.layer_biases[l][i], fd, 1e-4));
            }
        }
        ++done;
    }
}

TEST_CASE("gradients vanish at a perfect fit and average over duplicated rows") {
    MlpTrainConfig config;
    config.hidden_sizes = {5};
    config.seed = 8;
    MlpModel model = init_mlp(3, config, Task::Regression);
    auto engine = make_engine(9);
    std::normal_distribution<double> normal;
    for (auto& b : model.layer_biases) {
        for (long i = 0; i < b.size(); ++i) b[i] = 0.2 * normal(engine);
    }

    TabularDataset env;
    env.features = Matrix::Random(12, 3);
    env.target = forward(model, env.features).col(0);
    env.task = Task::Regression;

    SUBCASE("perfect fit") {
        const MlpGradients grads = env_backward(model, env, MlpLoss::MSE);
        for (const auto& w : grads.layer_weights) CHECK(w.cwiseAbs().maxCoeff() == 0.0);
        for (const auto& b : grads.layer_biases) CHECK(b.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("duplicated rows leave the mean gradient unchanged") {
        env.target = Vector::Random(12);
        TabularDataset doubled;
        doubled.task = Task::Regression;
        doubled.features.resize(24, 3);
        doubled.features << env.features, env.features;
        doubled.target.resize(24);
        doubled.target << env.target, env.target;
        const MlpGradients g1 = env_backward(model, env, MlpLoss::MSE);
        const MlpGradients g2 = env_backward(model, doubled, MlpLoss::MSE);
        for (std::size_t l = 0; l < g1.layer_weights.size(); ++l) {
            CHECK((g1.layer_weights[l] - g2.layer_weights[l]).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((g1.layer_biases[l] - g2.layer_biases[l]).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
    SUBCASE("empty environment is rejected") {
        TabularDataset empty;
        empty.features.resize(0, 3);
        empty.target.resize(0);
        empty.task = Task::Regression;
        CHECK_THROWS_AS(env_backward(model, empty, MlpLoss::MSE), std::invalid_argument);
    }
}

TEST_CASE("feature gradient norms") {
    MlpGradients g;
    g.layer_weights = {Matrix::Zero(3, 2), Matrix::Zero(2, 1)};
    g.layer_biases = {Vector::Zero(2), Vector::Zero(1)};
    g.layer_weights[0].row(1) << 3.0, 4.0;

    SUBCASE("hand-computed norms") {
        const Matrix norms = feature_gradient_norms({g});
        CHECK(norms.rows() == 1);
        CHECK(norms.cols() == 3);
        CHECK(norms(0, 0) == 0.0);
        CHECK(norms(0, 1) == 5.0);
        CHECK(norms(0, 2) == 0.0);
    }
    SUBCASE("permuting hidden units does not change the norms") {
        MlpGradients permuted = g;
        permuted.layer_weights[0].col(0).swap(permuted.layer_weights[0].col(1));
        CHECK(feature_gradient_norms({g}) == feature_gradient_norms({permuted}));
    }
    SUBCASE("shape mismatches are rejected") {
        MlpGradients other = g;
        other.layer_weights[0] = Matrix::Zero(4, 2);
        CHECK_THROWS_AS(feature_gradient_norms({g, other}), std::invalid_argument);
        CHECK_THROWS_AS(feature_gradient_norms({}), std::invalid_argument);
    }
}

TEST_CASE("masking statistics equal the consistency operations at step zero") {
    const EnvironmentSet envs = generate_two_feature_demo({0.2, 2.0, 5.0}, 500, 31);
    MlpTrainConfig config;
    config.hidden_sizes = {4};
    config.seed = 3;
    config.steps = 1;
    config.threshold = 4.0;
    config.trace_every = 1;
    config.learning_rate = 1e-3;

    const auto [model, trace] = train_mlp_cglearn(envs, config);
    REQUIRE(trace.masks.size() == 1);

    const MlpModel initial = init_mlp(2, config, Task::Regression);
    std::vector<MlpGradients> grads;
    for (const auto& env : envs.environments) {
        grads.push_back(env_backward(initial, env, MlpLoss::MSE));
    }
    const ConsistencyStats stats = compute_stats(feature_gradient_norms(grads), config.threshold);
    CHECK(trace.masks[0] == stats.mask);
}

TEST_CASE("threshold zero reproduces the erm trajectory bit for bit") {
    EnvironmentSet envs;
    envs.environments = {regression_env(60, 3, 1), regression_env(60, 3, 2)};
    MlpTrainConfig config;
    config.hidden_sizes = {6};
    config.steps = 50;
    config.learning_rate = 5e-3;
    config.seed = 7;
    config.threshold = 0.0;

    const auto [masked, trace] = train_mlp_cglearn(envs, config);
    const MlpModel plain = train_mlp_erm(envs, config);
    CHECK(bitwise_equal(masked, plain));
    CHECK(trace.final_env_losses.size() == 2);
}

TEST_CASE("zero steps return the initialization and equal seeds agree") {
    EnvironmentSet envs;
    envs.environments = {regression_env(40, 3, 5), regression_env(40, 3, 6)};
    MlpTrainConfig config;
    config.hidden_sizes = {4};
    config.steps = 0;
    config.seed = 21;

    const MlpModel trained = train_mlp_erm(envs, config);
    const MlpModel fresh = init_mlp(3, config, Task::Regression);
    CHECK(bitwise_equal(trained, fresh));

    config.steps = 30;
    const MlpModel a = train_mlp_erm(envs, config);
    const MlpModel b = train_mlp_erm(envs, config);
    CHECK(bitwise_equal(a, b));
    config.seed = 22;
    const MlpModel c = train_mlp_erm(envs, config);
    CHECK_FALSE(bitwise_equal(a, c));
}

TEST_CASE("the demo's spurious feature row freezes at upper thresholds") {
    const EnvironmentSet envs = generate_two_feature_demo({0.2, 2.0, 5.0}, 2000, 41);
    MlpTrainConfig config;
    config.hidden_sizes = {8};
    config.steps = 300;
    config.learning_rate = 1e-3;
    // the causal feature's norm ratio only crosses the upper thresholds for
    // part of the trajectory; this seed is one where it does at both
    config.seed = 14;
    config.trace_every = 1;

    const MlpModel initial = init_mlp(2, config, Task::Regression);

    for (const double threshold : {16.0, 64.0}) {
        CAPTURE(threshold);
        config.threshold = threshold;
        const auto [model, trace] = train_mlp_cglearn(envs, config);
        REQUIRE(trace.masks.size() == 300);
        // row 1 belongs to the environment-dependent feature
        CHECK(model.layer_weights[0].row(1) == initial.layer_weights[0].row(1));
        for (const auto& mask : trace.masks) CHECK(mask[1] == 0.0);
        CHECK(model.layer_weights[0].row(0) != initial.layer_weights[0].row(0));
        double moved_steps = 0;
        for (const auto& mask : trace.masks) moved_steps += mask[0];
        CHECK(moved_steps > 0);
    }
}

TEST_CASE("noiseless regression converges near zero training loss") {
    EnvironmentSet envs;
    envs.environments = {regression_env(300, 3, 11), regression_env(300, 3, 12)};
    MlpTrainConfig config;
    config.hidden_sizes = {16};
    config.steps = 4000;
    config.learning_rate = 1e-2;
    config.seed = 4;

    const MlpModel model = train_mlp_erm(envs, config);
    const double pooled = 0.5 * (mlp_loss(model, envs.env(0), MlpLoss::MSE) +
                                 mlp_loss(model, envs.env(1), MlpLoss::MSE));
    CHECK(pooled < 1e-2);
}

TEST_CASE("classification training loss decreases over most 100-step windows") {
    EnvironmentSet envs;
    envs.environments = {blob_env(200, 61), blob_env(200, 62)};
    MlpTrainConfig config;
    config.hidden_sizes = {8};
    config.steps = 600;
    config.learning_rate = 5e-2;
    config.loss = MlpLoss::CrossEntropy;
    config.seed = 19;
    config.threshold = 0.0;
    config.trace_every = 1;

    const auto [model, trace] = train_mlp_cglearn(envs, config);
    REQUIRE(trace.losses.size() == 600);
    long improving = 0;
    long total = 0;
    for (std::size_t k = 0; k + 100 < trace.losses.size(); ++k) {
        ++total;
        if (trace.losses[k + 100] <= trace.losses[k] + 1e-12) ++improving;
    }
    CHECK(static_cast<double>(improving) / static_cast<double>(total) >= 0.9);
    CHECK(trace.losses.back() < trace.losses.front());
}

TEST_CASE("model save/load round-trips exactly") {
    MlpTrainConfig config;
    config.hidden_sizes = {5, 3};
    config.seed = 77;
    MlpModel model = init_mlp(4, config, Task::Classification, 3);
    auto engine = make_engine(78);
    std::normal_distribution<double> normal;
    for (auto& b : model.layer_biases) {
        for (long i = 0; i < b.size(); ++i) b[i] = normal(engine);
    }

    const MlpModel loaded = MlpModel::from_json(model.to_json());
    CHECK(bitwise_equal(model, loaded));

    SUBCASE("documents that do not describe a model are rejected") {
        CHECK_THROWS_AS(MlpModel::from_json("not json"), DataError);
        CHECK_THROWS_AS(MlpModel::from_json("{\"layers\": []}"), DataError);
        std::string tampered = model.to_json();
        const auto pos = tampered.find("\"rows\": 4");
        REQUIRE(pos != std::string::npos);
        tampered.replace(pos, 9, "\"rows\": 9");
        CHECK_THROWS_AS(MlpModel::from_json(tampered), DataError);
    }
}

TEST_CASE("threshold selection returns a candidate with a finite model") {
    const EnvironmentSet envs = generate_two_feature_demo({0.2, 2.0, 5.0}, 400, 15);
    EnvironmentSet train;
    train.environments = {envs.env(1), envs.env(2)};
    MlpTrainConfig config;
    config.hidden_sizes = {4};
    config.steps = 100;
    config.learning_rate = 1e-3;
    config.seed = 5;

    const auto [threshold, model] = select_mlp_threshold(train, envs.env(0), config);
    const auto& candidates = config.threshold_candidates;
    CHECK(std::find(candidates.begin(), candidates.end(), threshold) != candidates.end());
    CHECK_NOTHROW(model.validate());

    config.threshold_candidates.clear();
    CHECK_THROWS_AS(select_mlp_threshold(train, envs.env(0), config), ConfigError);
}

TEST_CASE("trainer validation and divergence") {
    const EnvironmentSet envs = generate_two_feature_demo({0.2, 2.0, 5.0}, 200, 3);
    MlpTrainConfig config;
    config.hidden_sizes = {4};

    SUBCASE("masking needs at least two environments") {
        EnvironmentSet single;
        single.environments = {envs.env(0)};
        CHECK_THROWS_AS(train_mlp_cglearn(single, config), ConfigError);
        CHECK_NOTHROW(train_mlp_erm(single, MlpTrainConfig{{2}, 1e-3, 5}));
    }
    SUBCASE("config sanity") {
        MlpTrainConfig bad = config;
        bad.learning_rate = -1.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = config;
        bad.steps = -1;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = config;
        bad.hidden_sizes = {0};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = config;
        bad.threshold = -0.5;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = config;
        bad.trace_every = -2;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        CHECK_THROWS_AS(init_mlp(0, config, Task::Regression), ConfigError);
        CHECK_THROWS_AS(init_mlp(3, config, Task::Classification, 0), ConfigError);
    }
    SUBCASE("a huge step size raises a training error with the step index") {
        MlpTrainConfig wild = config;
        wild.learning_rate = 1e9;
        wild.steps = 50;
        try {
            train_mlp_erm(envs, wild);
            FAIL("expected divergence");
        } catch (const TrainingError& err) {
            CHECK(err.step >= 0);
            CHECK(err.step < 50);
        }
    }
}
