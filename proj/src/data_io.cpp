#include "cglearn/data_io.hpp"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace cglearn {
namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream stream(line);
    while (std::getline(stream, cell, ',')) {
        cells.push_back(trim(cell));
    }
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

double parse_cell(const DatasetSpec& spec, const std::string& cell, long line_no,
                  const std::string& column) {
    double value = 0.0;
    const char* first = cell.data();
    const char* last = first + cell.size();
    const auto result = std::from_chars(first, last, value);
    if (result.ec != std::errc{} || result.ptr != last) {
        throw DataError(spec.name + ": line " + std::to_string(line_no) + ", column '" +
                        column + "': cannot parse '" + cell + "' as a number");
    }
    if (!std::isfinite(value)) {
        throw DataError(spec.name + ": line " + std::to_string(line_no) + ", column '" +
                        column + "': non-finite value '" + cell + "'");
    }
    return value;
}

}  // namespace

TabularDataset load_csv(const DatasetSpec& spec) {
    std::ifstream file(spec.path);
    if (!file) {
        throw DataError(spec.name + ": cannot open '" + spec.path.string() + "'");
    }

    std::string line;
    if (!std::getline(file, line)) {
        throw DataError(spec.name + ": empty file '" + spec.path.string() + "'");
    }
    std::vector<std::string> header = split_line(line);
    for (auto& name : header) name = strip_quotes(name);

    long target_index = -1;
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (header[j] == spec.target_column) {
            target_index = static_cast<long>(j);
            break;
        }
    }
    if (target_index < 0) {
        throw DataError(spec.name + ": target column '" + spec.target_column +
                        "' not found in header");
    }

    std::vector<std::vector<double>> rows;
    std::vector<double> raw_targets;
    long line_no = 1;
    while (std::getline(file, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::vector<std::string> cells = split_line(line);
        if (cells.size() != header.size()) {
            throw DataError(spec.name + ": line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(cells.size()));
        }
        std::vector<double> row;
        row.reserve(header.size() - 1);
        for (std::size_t j = 0; j < cells.size(); ++j) {
            const double value = parse_cell(spec, cells[j], line_no, header[j]);
            if (static_cast<long>(j) == target_index) {
                raw_targets.push_back(value);
            } else {
                row.push_back(value);
            }
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw DataError(spec.name + ": no data rows in '" + spec.path.string() + "'");
    }

    const long n = static_cast<long>(rows.size());
    const long d = static_cast<long>(header.size()) - 1;
    if (spec.n_expected >= 0 && n != spec.n_expected) {
        throw DataError(spec.name + ": expected " + std::to_string(spec.n_expected) +
                        " rows, got " + std::to_string(n));
    }
    if (spec.d_expected >= 0 && d != spec.d_expected) {
        throw DataError(spec.name + ": expected " + std::to_string(spec.d_expected) +
                        " feature columns, got " + std::to_string(d));
    }

    TabularDataset data;
    data.task = spec.task;
    data.features.resize(n, d);
    data.target.resize(n);
    for (long i = 0; i < n; ++i) {
        for (long j = 0; j < d; ++j) data.features(i, j) = rows[i][j];
    }
    data.feature_names.reserve(d);
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (static_cast<long>(j) != target_index) data.feature_names.push_back(header[j]);
    }

    if (spec.task == Task::Classification) {
        std::map<double, int> mapping;
        for (const double value : raw_targets) mapping.emplace(value, 0);
        if (mapping.size() < 2) {
            throw DataError(spec.name + ": classification target has fewer than 2 classes");
        }
        int next = 0;
        data.class_values.clear();
        for (auto& [value, index] : mapping) {
            index = next++;
            data.class_values.push_back(value);
        }
        data.n_classes = next;
        for (long i = 0; i < n; ++i) data.target[i] = mapping.at(raw_targets[i]);
    } else {
        for (long i = 0; i < n; ++i) data.target[i] = raw_targets[i];
    }

    data.validate();
    return data;
}

Matrix Standardizer::transform(const Matrix& features) const {
    if (features.cols() != mean.size()) {
        throw DataError("standardizer fitted on " + std::to_string(mean.size()) +
                        " features, got " + std::to_string(features.cols()));
    }
    return (features.rowwise() - mean.transpose()).array().rowwise() /
           std.transpose().array();
}

TabularDataset Standardizer::transform(const TabularDataset& data) const {
    TabularDataset out = data;
    out.features = transform(data.features);
    return out;
}

Standardizer fit_standardizer(const TabularDataset& train, bool eps_guard) {
    if (train.n() == 0) throw DataError("cannot fit a standardizer on an empty dataset");
    const double n = static_cast<double>(train.n());
    Standardizer scaler;
    scaler.mean = train.features.colwise().mean();
    const Matrix centered = train.features.rowwise() - scaler.mean.transpose();
    scaler.std = (centered.array().square().colwise().sum() / n).sqrt();
    for (long j = 0; j < scaler.std.size(); ++j) {
        if (scaler.std[j] <= 0.0) {
            if (!eps_guard) {
                const std::string name = j < static_cast<long>(train.feature_names.size())
                                             ? train.feature_names[j]
                                             : std::to_string(j);
                throw DataError("feature '" + name + "' has zero variance in the training pool");
            }
            scaler.std[j] = 1.0;
        }
    }
    return scaler;
}

Standardizer fit_standardizer(const EnvironmentSet& train_envs, bool eps_guard) {
    if (train_envs.m() == 0) throw DataError("cannot fit a standardizer on zero environments");
    long total = 0;
    for (const auto& env : train_envs.environments) total += env.n();
    TabularDataset pooled;
    pooled.task = train_envs.environments.front().task;
    pooled.feature_names = train_envs.environments.front().feature_names;
    pooled.features.resize(total, train_envs.environments.front().d());
    pooled.target.resize(total);
    long offset = 0;
    for (const auto& env : train_envs.environments) {
        if (env.d() != pooled.features.cols()) {
            throw DataError("environments disagree on feature count");
        }
        pooled.features.middleRows(offset, env.n()) = env.features;
        pooled.target.segment(offset, env.n()) = env.target;
        offset += env.n();
    }
    return fit_standardizer(pooled, eps_guard);
}

}  // namespace cglearn
