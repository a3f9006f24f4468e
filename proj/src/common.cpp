#include "cglearn/common.hpp"

#include <cmath>

namespace cglearn {

void TabularDataset::validate() const {
    if (features.rows() == 0 || features.cols() == 0)
        throw std::invalid_argument("dataset has no rows or no columns");
    if (target.size() != features.rows())
        throw std::invalid_argument("target length does not match feature rows");
    if (!feature_names.empty() &&
        feature_names.size() != static_cast<std::size_t>(features.cols()))
        throw std::invalid_argument("feature_names length does not match feature columns");
    if (!features.allFinite() || !target.allFinite())
        throw std::invalid_argument("dataset contains non-finite entries");
    if (task == Task::Classification) {
        if (n_classes < 1)
            throw std::invalid_argument("classification dataset needs n_classes >= 1");
        for (Eigen::Index i = 0; i < target.size(); ++i) {
            double t = target[i];
            if (t != std::floor(t) || t < 0.0 || t >= static_cast<double>(n_classes))
                throw std::invalid_argument("classification target out of [0, n_classes)");
        }
    }
}

void EnvironmentSet::validate() const {
    if (environments.empty())
        throw std::invalid_argument("environment set is empty");
    const auto& first = environments.front();
    for (const auto& e : environments) {
        e.validate();
        if (e.d() != first.d() || e.task != first.task ||
            e.feature_names != first.feature_names)
            throw std::invalid_argument("environments are not schema-compatible");
    }
}

}  // namespace cglearn
