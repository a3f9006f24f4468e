#include "cglearn/synthgen.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace cglearn {

namespace {

Matrix normal_matrix(std::mt19937_64& eng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = gauss(eng);
    return out;
}

Vector normal_vector(std::mt19937_64& eng, Eigen::Index size) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector out(size);
    for (Eigen::Index i = 0; i < size; ++i) out[i] = gauss(eng);
    return out;
}

// Orthogonalized Gaussian matrix with the R-diagonal sign fix so the
// factorization is unique and Haar-ish.
Matrix random_orthogonal(std::mt19937_64& eng, Eigen::Index d) {
    const Matrix a = normal_matrix(eng, d, d);
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix q = qr.householderQ() * Matrix::Identity(d, d);
    const Matrix r = qr.matrixQR();
    for (Eigen::Index j = 0; j < d; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

std::vector<std::string> numbered_names(int d) {
    std::vector<std::string> names;
    names.reserve(d);
    for (int j = 1; j <= d; ++j) names.push_back("x" + std::to_string(j));
    return names;
}

}  // namespace

void SemConfig::validate() const {
    if (env_values.empty())
        throw ConfigError("env_values must be nonempty");
    for (double e : env_values)
        if (!(e > 0.0)) throw ConfigError("env_values must all be positive");
    if (n_samples < 1) throw ConfigError("n_samples must be positive");
    if (d_causal < 1 || d_effect < 1)
        throw ConfigError("d_causal and d_effect must be positive");
}

std::string SemConfig::case_name() const {
    std::string name;
    name += observation == Observation::FullyObserved ? 'F' : 'P';
    name += noise == NoiseKind::Homoskedastic ? 'O' : 'E';
    name += scrambling == Scrambling::Unscrambled ? 'U' : 'S';
    return name;
}

SemConfig sem_config_from_name(const std::string& name) {
    if (name.size() != 3)
        throw ConfigError("case name must be three letters, e.g. FOU: " + name);
    SemConfig config;
    switch (name[0]) {
        case 'F': config.observation = Observation::FullyObserved; break;
        case 'P': config.observation = Observation::PartiallyObserved; break;
        default: throw ConfigError("case letter 1 must be F or P: " + name);
    }
    switch (name[1]) {
        case 'O': config.noise = NoiseKind::Homoskedastic; break;
        case 'E': config.noise = NoiseKind::Heteroskedastic; break;
        default: throw ConfigError("case letter 2 must be O or E: " + name);
    }
    switch (name[2]) {
        case 'U': config.scrambling = Scrambling::Unscrambled; break;
        case 'S': config.scrambling = Scrambling::Scrambled; break;
        default: throw ConfigError("case letter 3 must be U or S: " + name);
    }
    return config;
}

std::pair<EnvironmentSet, GroundTruth> generate_environments(const SemConfig& config) {
    config.validate();
    const int dc = config.d_causal;
    const int de = config.d_effect;
    const int d = dc + de;
    const int n = config.n_samples;
    const bool partial = config.observation == Observation::PartiallyObserved;
    const bool hetero = config.noise == NoiseKind::Heteroskedastic;

    auto eng = make_engine(config.seed);

    GroundTruth truth;
    truth.w_causal = normal_vector(eng, dc);
    truth.w_effect = normal_vector(eng, de);
    truth.scramble = config.scrambling == Scrambling::Scrambled
                         ? random_orthogonal(eng, d)
                         : Matrix::Identity(d, d);
    if (partial) {
        truth.confounder_mix = normal_matrix(eng, dc, dc);
        truth.confounder_target = normal_vector(eng, dc);
    }

    EnvironmentSet envs;
    const auto names = numbered_names(d);
    for (double e : config.env_values) {
        Matrix x_cau = e * normal_matrix(eng, n, dc);
        Matrix h;
        if (partial) {
            h = e * normal_matrix(eng, n, dc);
            x_cau += h * truth.confounder_mix.transpose();
        }
        const double noise_sd = hetero ? e : 1.0;
        Vector y = x_cau * truth.w_causal + noise_sd * normal_vector(eng, n);
        if (partial) y += h * truth.confounder_target;
        Matrix x_eff = y * truth.w_effect.transpose() + normal_matrix(eng, n, de);

        Matrix x_gen(n, d);
        x_gen << x_cau, x_eff;

        TabularDataset env;
        env.features = x_gen * truth.scramble.transpose();
        env.target = std::move(y);
        env.feature_names = names;
        env.task = Task::Regression;
        envs.environments.push_back(std::move(env));
    }
    return {std::move(envs), std::move(truth)};
}

EnvironmentSet generate_two_feature_demo(const std::vector<double>& e_values,
                                         int n, std::uint64_t seed) {
    if (e_values.empty()) throw ConfigError("e_values must be nonempty");
    if (n < 1) throw ConfigError("n must be positive");

    auto eng = make_engine(seed);
    EnvironmentSet envs;
    for (double e : e_values) {
        const Vector x1 = normal_vector(eng, n);
        const Vector y = x1 + 0.5 * e * normal_vector(eng, n);
        const Vector x2 = e * y + normal_vector(eng, n);

        TabularDataset env;
        env.features.resize(n, 2);
        env.features.col(0) = x1;
        env.features.col(1) = x2;
        env.target = y;
        env.feature_names = {"x1", "x2"};
        env.task = Task::Regression;
        envs.environments.push_back(std::move(env));
    }
    return envs;
}

EnvironmentSet split_into_batches(const TabularDataset& dataset, int b,
                                  std::uint64_t seed) {
    dataset.validate();
    const Eigen::Index n = dataset.n();
    if (b < 2) throw std::invalid_argument("need at least two batches");
    if (static_cast<Eigen::Index>(b) > n)
        throw std::invalid_argument("more batches than rows");

    std::vector<Eigen::Index> perm(n);
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    auto eng = make_engine(seed);
    std::shuffle(perm.begin(), perm.end(), eng);

    EnvironmentSet out;
    Eigen::Index at = 0;
    for (int i = 0; i < b; ++i) {
        const Eigen::Index size = n / b + (i < n % b ? 1 : 0);
        TabularDataset batch;
        batch.features.resize(size, dataset.d());
        batch.target.resize(size);
        for (Eigen::Index r = 0; r < size; ++r) {
            batch.features.row(r) = dataset.features.row(perm[at + r]);
            batch.target[r] = dataset.target[perm[at + r]];
        }
        batch.feature_names = dataset.feature_names;
        batch.task = dataset.task;
        batch.n_classes = dataset.n_classes;
        batch.class_values = dataset.class_values;
        out.environments.push_back(std::move(batch));
        at += size;
    }
    return out;
}

void export_csv(const EnvironmentSet& envs, const std::string& directory,
                const std::string& stem) {
    envs.validate();
    std::filesystem::create_directories(directory);
    for (std::size_t i = 0; i < envs.m(); ++i) {
        const auto& env = envs.env(i);
        const auto path = std::filesystem::path(directory) /
                          (stem + "_env" + std::to_string(i) + ".csv");
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path.string());
        for (Eigen::Index j = 0; j < env.d(); ++j) {
            out << (env.feature_names.empty() ? "x" + std::to_string(j + 1)
                                              : env.feature_names[j]);
            out << ',';
        }
        out << "target\n";
        for (Eigen::Index r = 0; r < env.n(); ++r) {
            for (Eigen::Index j = 0; j < env.d(); ++j)
                out << format_double(env.features(r, j)) << ',';
            out << format_double(env.target[r]) << '\n';
        }
    }
}

}  // namespace cglearn
