#include "cglearn/consistency.hpp"

#include <cmath>

namespace cglearn {

void GradientSample::validate() const {
    if (per_env_values.size() < 2)
        throw std::invalid_argument("gradient sample needs at least two environments");
    if (!per_env_values.allFinite())
        throw std::invalid_argument("gradient sample has non-finite entries");
}

double mean_gradient(const GradientSample& sample) {
    if (sample.per_env_values.size() == 0)
        throw std::invalid_argument("gradient sample is empty");
    return sample.per_env_values.mean();
}

double std_gradient(const GradientSample& sample) {
    if (sample.per_env_values.size() == 0)
        throw std::invalid_argument("gradient sample is empty");
    const double mu = sample.per_env_values.mean();
    const double var =
        (sample.per_env_values.array() - mu).square().mean();
    return std::sqrt(var);
}

double consistency_ratio(double mu, double sigma) {
    if (sigma < 0.0)
        throw std::invalid_argument("sigma must be nonnegative");
    return std::abs(mu) / (sigma + kConsistencyEps);
}

Vector consistency_mask(const Vector& ratios, double threshold) {
    if (threshold < 0.0)
        throw std::invalid_argument("threshold must be nonnegative");
    Vector mask(ratios.size());
    for (Eigen::Index j = 0; j < ratios.size(); ++j)
        mask[j] = ratios[j] >= threshold ? 1.0 : 0.0;
    return mask;
}

ConsistencyStats compute_stats(const Matrix& per_env_grads, double threshold) {
    if (per_env_grads.rows() < 2)
        throw std::invalid_argument("consistency stats need at least two environments");
    const Eigen::Index d = per_env_grads.cols();
    ConsistencyStats stats;
    stats.threshold = threshold;
    stats.mu = per_env_grads.colwise().mean();
    stats.sigma.resize(d);
    stats.ratio.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        const double var =
            (per_env_grads.col(j).array() - stats.mu[j]).square().mean();
        stats.sigma[j] = std::sqrt(var);
        stats.ratio[j] = consistency_ratio(stats.mu[j], stats.sigma[j]);
    }
    stats.mask = consistency_mask(stats.ratio, threshold);
    return stats;
}

}  // namespace cglearn
