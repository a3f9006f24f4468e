#include "cglearn/envcluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "cglearn/data_io.hpp"

namespace cglearn {
namespace {

constexpr int kMaxLloydIterations = 300;

double wcss_of(const Matrix& features, const Eigen::VectorXi& labels, const Matrix& centroids) {
    double total = 0.0;
    for (long i = 0; i < features.rows(); ++i) {
        total += (features.row(i) - centroids.row(labels[i])).squaredNorm();
    }
    return total;
}

Matrix seed_centroids(const Matrix& features, int k, std::mt19937_64& engine) {
    const long n = features.rows();
    Matrix centroids(k, features.cols());
    std::uniform_int_distribution<long> first(0, n - 1);
    centroids.row(0) = features.row(first(engine));

    Vector nearest = (features.rowwise() - centroids.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = nearest.sum();
        if (total <= 0.0) {
            throw ClusteringError("fewer distinct rows than clusters");
        }
        // draw the next centroid with probability proportional to the squared
        // distance from the chosen ones
        std::uniform_real_distribution<double> uniform(0.0, total);
        double remaining = uniform(engine);
        long picked = n - 1;
        for (long i = 0; i < n; ++i) {
            remaining -= nearest[i];
            if (remaining <= 0.0) {
                picked = i;
                break;
            }
        }
        centroids.row(c) = features.row(picked);
        nearest = nearest.cwiseMin(
            (features.rowwise() - centroids.row(c)).rowwise().squaredNorm());
    }
    return centroids;
}

struct LloydResult {
    Eigen::VectorXi labels;
    Matrix centroids;
    double wcss = 0.0;
    std::vector<double> history;
};

LloydResult lloyd(const Matrix& features, int k, std::mt19937_64& engine) {
    const long n = features.rows();
    LloydResult result;
    result.centroids = seed_centroids(features, k, engine);
    result.labels = Eigen::VectorXi::Constant(n, -1);

    for (int iteration = 0; iteration < kMaxLloydIterations; ++iteration) {
        bool changed = false;
        for (long i = 0; i < n; ++i) {
            long best = 0;
            double best_dist = (features.row(i) - result.centroids.row(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double dist = (features.row(i) - result.centroids.row(c)).squaredNorm();
                if (dist < best_dist) {
                    best_dist = dist;
                    best = c;
                }
            }
            if (result.labels[i] != best) {
                result.labels[i] = static_cast<int>(best);
                changed = true;
            }
        }
        result.history.push_back(wcss_of(features, result.labels, result.centroids));
        if (!changed && iteration > 0) break;

        Matrix sums = Matrix::Zero(k, features.cols());
        std::vector<long> counts(k, 0);
        for (long i = 0; i < n; ++i) {
            sums.row(result.labels[i]) += features.row(i);
            ++counts[result.labels[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                result.centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
            } else {
                // reseed an empty cluster at the point farthest from its centroid
                long farthest = 0;
                double far_dist = -1.0;
                for (long i = 0; i < n; ++i) {
                    const double dist =
                        (features.row(i) - result.centroids.row(result.labels[i])).squaredNorm();
                    if (dist > far_dist) {
                        far_dist = dist;
                        farthest = i;
                    }
                }
                result.centroids.row(c) = features.row(farthest);
            }
        }
    }
    result.wcss = wcss_of(features, result.labels, result.centroids);
    return result;
}

}  // namespace

ClusterAssignment kmeans(const Matrix& features, int k, std::uint64_t seed, int restarts) {
    const long n = features.rows();
    if (k < 2) throw std::invalid_argument("need at least 2 clusters");
    if (n < k) throw std::invalid_argument("need at least k rows");
    if (restarts < 1) throw std::invalid_argument("need at least 1 restart");
    if (!features.allFinite()) throw std::invalid_argument("features must be finite");
    if ((features.rowwise() - features.row(0)).cwiseAbs().maxCoeff() == 0.0) {
        throw ClusteringError("all rows are identical");
    }

    LloydResult best;
    best.wcss = std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < restarts; ++restart) {
        auto engine = make_engine(derive_seed(seed, static_cast<std::uint64_t>(restart)));
        LloydResult candidate = lloyd(features, k, engine);
        if (candidate.wcss < best.wcss) best = std::move(candidate);
    }

    std::vector<long> counts(k, 0);
    for (long i = 0; i < n; ++i) ++counts[best.labels[i]];
    for (int c = 0; c < k; ++c) {
        if (counts[c] == 0) {
            throw ClusteringError("cluster " + std::to_string(c) + " ended up empty");
        }
    }

    ClusterAssignment assignment;
    assignment.labels = std::move(best.labels);
    assignment.k = k;
    assignment.centroids = std::move(best.centroids);
    assignment.wcss = best.wcss;
    assignment.wcss_history = std::move(best.history);
    assignment.silhouette = silhouette_score(features, assignment.labels);
    return assignment;
}

double silhouette_score(const Matrix& features, const Eigen::VectorXi& labels) {
    const long n = features.rows();
    if (labels.size() != n) throw std::invalid_argument("one label per row required");
    if (n < 2) throw std::invalid_argument("need at least 2 rows");
    const int k = labels.maxCoeff() + 1;
    if (labels.minCoeff() < 0) throw std::invalid_argument("labels must be nonnegative");

    std::vector<long> counts(k, 0);
    for (long i = 0; i < n; ++i) ++counts[labels[i]];
    int present = 0;
    for (const long count : counts) present += count > 0;
    if (present < 2) throw std::invalid_argument("silhouette needs at least 2 clusters");

    double total = 0.0;
    std::vector<double> cluster_sums(k);
    for (long i = 0; i < n; ++i) {
        std::fill(cluster_sums.begin(), cluster_sums.end(), 0.0);
        for (long j = 0; j < n; ++j) {
            if (j == i) continue;
            cluster_sums[labels[j]] += (features.row(i) - features.row(j)).norm();
        }
        const int own = labels[i];
        if (counts[own] == 1) continue;  // singletons score 0
        const double a = cluster_sums[own] / static_cast<double>(counts[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c == own || counts[c] == 0) continue;
            b = std::min(b, cluster_sums[c] / static_cast<double>(counts[c]));
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

std::pair<EnvironmentSet, ClusterAssignment> build_environments(const TabularDataset& dataset,
                                                                KRange k_range,
                                                                std::uint64_t seed) {
    dataset.validate();
    const long n = dataset.n();
    if (k_range.lo < 2 || k_range.hi < k_range.lo || k_range.hi >= n) {
        throw std::invalid_argument("k range must satisfy 2 <= lo <= hi < n");
    }

    const Standardizer scaler = fit_standardizer(dataset, /*eps_guard=*/true);
    const Matrix standardized = scaler.transform(dataset.features);

    ClusterAssignment best;
    best.silhouette = -std::numeric_limits<double>::infinity();
    for (int k = k_range.lo; k <= k_range.hi; ++k) {
        ClusterAssignment candidate =
            kmeans(standardized, k, derive_seed(seed, static_cast<std::uint64_t>(k)));
        if (candidate.silhouette > best.silhouette) best = std::move(candidate);
    }

    EnvironmentSet envs;
    envs.environments.resize(best.k);
    std::vector<std::vector<long>> members(best.k);
    for (long i = 0; i < n; ++i) members[best.labels[i]].push_back(i);
    for (int c = 0; c < best.k; ++c) {
        TabularDataset& env = envs.environments[c];
        env.task = dataset.task;
        env.feature_names = dataset.feature_names;
        env.n_classes = dataset.n_classes;
        env.class_values = dataset.class_values;
        env.features.resize(static_cast<long>(members[c].size()), dataset.d());
        env.target.resize(static_cast<long>(members[c].size()));
        for (std::size_t r = 0; r < members[c].size(); ++r) {
            env.features.row(static_cast<long>(r)) = dataset.features.row(members[c][r]);
            env.target[static_cast<long>(r)] = dataset.target[members[c][r]];
        }
    }
    return {std::move(envs), std::move(best)};
}

}  // namespace cglearn
