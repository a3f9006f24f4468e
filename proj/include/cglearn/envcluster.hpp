#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cglearn/common.hpp"

namespace cglearn {

struct ClusterAssignment {
    Eigen::VectorXi labels;  // one entry per row, values in [0, k)
    int k = 0;
    Matrix centroids;  // k x d
    double silhouette = 0.0;
    double wcss = 0.0;
    // per-iteration within-cluster sum of squares of the winning restart
    std::vector<double> wcss_history;
};

// Lloyd iterations from k-means++ style seeding, best of `restarts` by
// within-cluster sum of squares. Deterministic given the seed. Rows must not
// all be identical, and every returned cluster is nonempty.
ClusterAssignment kmeans(const Matrix& features, int k, std::uint64_t seed, int restarts = 10);

// Mean over points of (b - a) / max(a, b) with a the mean intra-cluster
// distance and b the smallest mean distance to another cluster. Singleton
// points score 0. Needs at least two distinct labels.
double silhouette_score(const Matrix& features, const Eigen::VectorXi& labels);

struct KRange {
    int lo = 3;
    int hi = 10;
};

// Clusters the standardized features (target excluded) for every k in the
// range, keeps the k with the best silhouette (ties toward smaller k), and
// partitions the raw rows by label into pseudo-environments.
std::pair<EnvironmentSet, ClusterAssignment> build_environments(const TabularDataset& dataset,
                                                                KRange k_range,
                                                                std::uint64_t seed);

}  // namespace cglearn
