#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "flowopd/condition.hpp"
#include "flowopd/flow_core.hpp"
#include "flowopd/numgrad.hpp"
#include "flowopd/random.hpp"
#include "flowopd/rewards.hpp"

namespace flowopd {

struct EvalConfig {
    std::size_t samples_per_task = 256;
    TimeGrid grid{40, 0.02, 0.98};
    std::uint64_t seed = 4242;

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct EvalReport {
    std::array<double, kNumTasks> task_reward{};

    double operator[](TaskId t) const { return task_reward[static_cast<std::size_t>(t)]; }
    double& operator[](TaskId t) { return task_reward[static_cast<std::size_t>(t)]; }
    /// Mean of the four normalized scores. Every reward already lives in
    /// [0, 1], so normalization is the identity.
    double normalized_average() const;
};

/// Mean reward of `task` over its condition templates, samples split evenly
/// across templates. Sample seeds depend only on (config.seed, condition,
/// index), so different models see the same noise.
double evaluate_task(const ParamVector& params, TaskId task, const TaskWorld& world,
                     const NoiseSchedule& schedule, const EvalConfig& config);

EvalReport evaluate(const ParamVector& params, const TaskWorld& world,
                    const NoiseSchedule& schedule, const EvalConfig& config);

/// `n` conditions: task uniform over `tasks`, then template uniform within the task.
std::vector<Condition> draw_conditions(const TaskWorld& world, std::span<const TaskId> tasks,
                                       std::size_t n, Rng& rng);

}  // namespace flowopd
