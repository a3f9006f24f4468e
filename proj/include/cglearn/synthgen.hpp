#pragma once

#include "cglearn/common.hpp"

#include <utility>

namespace cglearn {

enum class Scrambling { Unscrambled, Scrambled };
enum class Observation { FullyObserved, PartiallyObserved };
enum class NoiseKind { Homoskedastic, Heteroskedastic };

// The eight benchmark cases are the cross product of the three axes. A
// config names one cell plus the environment values and sizes.
struct SemConfig {
    Scrambling scrambling = Scrambling::Unscrambled;
    Observation observation = Observation::FullyObserved;
    NoiseKind noise = NoiseKind::Homoskedastic;
    std::vector<double> env_values{0.2, 2.0, 5.0};
    int n_samples = 1000;
    int d_causal = 5;
    int d_effect = 5;
    std::uint64_t seed = 0;

    void validate() const;
    // Three-letter case id: observation (F/P), noise (O/E), scrambling (U/S).
    std::string case_name() const;
};

// Parses "FOU".."PES" into the three axis flags; other fields keep defaults.
SemConfig sem_config_from_name(const std::string& name);

struct GroundTruth {
    Vector w_causal;
    Vector w_effect;
    Matrix scramble;           // d x d orthogonal; identity when unscrambled
    Matrix confounder_mix;     // d_causal x d_causal; empty unless partially observed
    Vector confounder_target;  // d_causal; empty unless partially observed
};

// Generative process, one draw of coefficients per call and one data draw
// per environment value e:
//   X_cau ~ N(0, e^2 I)                   (+ H * confounder_mix' if partial)
//   H     ~ N(0, e^2 I)                   (partial only; the confounder
//                                          carries the environment scale)
//   Y     = X_cau * w_causal + N(0, s^2), s = e if heteroskedastic else 1
//                                          (+ H * confounder_target if partial)
//   X_eff = Y * w_effect' + N(0, I)
//   x_obs = S * [x_cau; x_eff]            (so S' * w_obs maps back)
std::pair<EnvironmentSet, GroundTruth> generate_environments(const SemConfig& config);

// Two-feature illustration: per environment value e,
//   X1 ~ N(0,1);  Y = X1 + 0.5 * N(0, e^2);  X2 = Y * e + N(0,1).
// X1's relation to Y is stable; X2's changes with e.
EnvironmentSet generate_two_feature_demo(const std::vector<double>& e_values,
                                         int n, std::uint64_t seed);

// Seeded random permutation, then b near-equal slices (remainder rows go to
// the earliest batches). The last batch is the conventional validation
// pseudo-environment.
EnvironmentSet split_into_batches(const TabularDataset& dataset, int b,
                                  std::uint64_t seed);

// One CSV per environment: <stem>_env<i>.csv with feature_names + "target".
void export_csv(const EnvironmentSet& envs, const std::string& directory,
                const std::string& stem);

}  // namespace cglearn
