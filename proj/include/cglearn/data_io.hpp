#pragma once

#include <filesystem>
#include <string>

#include "cglearn/common.hpp"

namespace cglearn {

// Expected schema of a CSV file on disk. Row/column expectations of -1 are
// not checked; anything else must match exactly.
struct DatasetSpec {
    std::string name;
    std::filesystem::path path;
    std::string target_column;
    Task task = Task::Regression;
    int n_expected = -1;
    int d_expected = -1;
};

// Reads a comma-separated file with a header row. All cells must parse as
// finite numbers. For classification the distinct target values are sorted
// ascending and mapped to class indices 0..k-1; the original values are kept
// in class_values. Throws DataError with the offending line and column named.
TabularDataset load_csv(const DatasetSpec& spec);

// Per-feature affine map fitted on training data only.
struct Standardizer {
    Vector mean;
    Vector std;  // always > 0; constant columns are stored with scale 1

    Matrix transform(const Matrix& features) const;
    TabularDataset transform(const TabularDataset& data) const;
};

// Fits mean/std on the pooled rows of the given training environments.
// A zero-variance column is an error unless eps_guard is set, in which case
// its scale is clamped to 1 so the column standardizes to a constant 0.
Standardizer fit_standardizer(const EnvironmentSet& train_envs, bool eps_guard = false);
Standardizer fit_standardizer(const TabularDataset& train, bool eps_guard = false);

}  // namespace cglearn
