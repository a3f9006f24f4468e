#pragma once

#include "cglearn/common.hpp"

namespace cglearn {

// Regularizer added to sigma in the ratio; zero spread means maximal
// consistency, so the ratio becomes effectively infinite instead of
// dividing by zero (a zero mean still gives ratio 0 either way).
inline constexpr double kConsistencyEps = 1e-12;

// One feature's per-environment gradient scalars: the raw gradient in the
// linear case, the first-layer row L2 norm in the MLP case.
struct GradientSample {
    Vector per_env_values;

    void validate() const;
};

// Per-feature statistics of one training step.
struct ConsistencyStats {
    Vector mu;
    Vector sigma;
    Vector ratio;
    Vector mask;  // entries are exactly 0.0 or 1.0
    double threshold = 0.0;
};

double mean_gradient(const GradientSample& sample);

// Population standard deviation (divisor m, not m-1).
double std_gradient(const GradientSample& sample);

double consistency_ratio(double mu, double sigma);

// mask_j = 1 iff ratios[j] >= threshold (inclusive).
Vector consistency_mask(const Vector& ratios, double threshold);

// per_env_grads is m x d: row i holds environment i's per-feature values.
ConsistencyStats compute_stats(const Matrix& per_env_grads, double threshold);

}  // namespace cglearn
