#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cglearn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Task { Regression, Classification };

// Error taxonomy mirrors the CLI exit codes: bad configuration, bad data,
// diverged training. Anything else is a plain std::invalid_argument.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& msg, long at_step)
        : std::runtime_error(msg), step(at_step) {}
    long step;
};

struct ClusteringError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Feature matrix plus target; the unit every trainer consumes.
// class_values records the original label of each class index when the
// target was mapped to contiguous indices (empty for regression).
struct TabularDataset {
    Matrix features;
    Vector target;
    std::vector<std::string> feature_names;
    Task task = Task::Regression;
    int n_classes = 0;
    std::vector<double> class_values;

    Eigen::Index n() const { return features.rows(); }
    Eigen::Index d() const { return features.cols(); }
    void validate() const;
};

// Ordered, schema-compatible collection of environments e_1..e_m.
struct EnvironmentSet {
    std::vector<TabularDataset> environments;

    std::size_t m() const { return environments.size(); }
    TabularDataset& env(std::size_t i) { return environments.at(i); }
    const TabularDataset& env(std::size_t i) const { return environments.at(i); }
    void validate() const;
};

// splitmix64 keeps derived seed streams well separated even for
// consecutive base seeds / stream ids.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::mt19937_64 make_engine(std::uint64_t seed) {
    return std::mt19937_64(splitmix64(seed));
}

// Shortest round-trip decimal form; keeps emitted files byte-stable.
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace cglearn
