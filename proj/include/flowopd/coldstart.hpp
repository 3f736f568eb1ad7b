#pragma once

// Student initializations: parameter merging and SFT on teacher samples.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "flowopd/fm_training.hpp"
#include "flowopd/opd.hpp"

namespace flowopd {

struct MergeSpec {
    std::vector<ParamVector> inputs;
    std::vector<double> weights;

    static MergeSpec uniform(std::vector<ParamVector> inputs);
    void validate() const;
};

/// sum_i w_i theta_i, evaluated as ref + sum_i w_i (theta_i - ref) with ref the
/// first input of largest weight, so a one-hot weight vector or identical
/// inputs reproduce that input bit for bit.
ParamVector merge_models(const MergeSpec& spec);

struct SftRecord {
    Condition condition;
    State sample;

    friend bool operator==(const SftRecord&, const SftRecord&) = default;
};

struct SftDataset {
    std::vector<SftRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    friend bool operator==(const SftDataset&, const SftDataset&) = default;
};

/// Final samples of the routed teacher, `per_condition` per condition.
/// Condition j, sample i uses trajectory_seed(derive_seed(seed, j), i).
SftDataset build_sft_dataset(const TeacherEnsemble& ensemble, std::span<const Condition> conditions,
                             std::size_t per_condition, const TimeGrid& grid,
                             const NoiseSchedule& schedule, std::uint64_t seed,
                             std::size_t threads = 1);

/// Line table: task, condition params (comma separated), sample coordinates.
void write_sft_dataset(std::ostream& os, const SftDataset& data);
SftDataset read_sft_dataset(std::istream& is);

struct SftConfig {
    std::size_t iterations = 1500;
    std::size_t batch_size = 128;
    OptimizerConfig optimizer{OptimizerKind::Adam, 2e-3, 10.0};
    double t_min = 0.02;
    double t_max = 0.98;
    double holdout_fraction = 0.2;
    std::uint64_t seed = 31;

    friend bool operator==(const SftConfig&, const SftConfig&) = default;
};

struct SftResult {
    ParamVector params;
    double heldout_before = 0.0;  // fm_loss of the init on the held-out split
    double heldout_after = 0.0;
    std::size_t train_size = 0;
    std::size_t heldout_size = 0;
};

/// Fits fm_loss on the training split with fresh noise and t every step.
/// The held-out loss uses one fixed draw of noise and t for before/after.
SftResult sft_train(const ParamVector& init, const SftDataset& data, const SftConfig& config,
                    const FmCallback& callback = {});

}  // namespace flowopd
