#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flowopd/condition.hpp"
#include "flowopd/random.hpp"

namespace flowopd {

struct MixtureComponent {
    State mean;
    double scale = 1.0;  // isotropic standard deviation
    double weight = 0.0;
};

/// The synthetic world: data distribution plus the parameters of the four rewards.
struct TaskWorld {
    std::vector<MixtureComponent> mixture;
    State preference_center;
    double preference_scale = 0.5;
    std::vector<std::string> region_labels;  // component index -> label
    double region_tau = 1.0;
    double ring_radius = 0.0;
    double ring_tau = 0.5;

    std::size_t dim() const { return mixture.empty() ? 0 : mixture.front().mean.size(); }
    std::size_t components() const { return mixture.size(); }
    void validate() const;

    /// Condition templates of one task (Region/Preference/Quality: one per
    /// component, Ring: one per world radius).
    std::vector<Condition> conditions(TaskId task) const;

    friend bool operator==(const TaskWorld&, const TaskWorld&) = default;
};

bool operator==(const MixtureComponent&, const MixtureComponent&);

/// Four unit-scale modes at (+-3, +-3). The preference bump sits at (4.5, 4.5),
/// pulling away from the (3, 3) region target; the ring passes through all modes.
TaskWorld default_world();

double reward_region(std::span<const double> x, const Condition& c, const TaskWorld& world);
double reward_ring(std::span<const double> x, const Condition& c, const TaskWorld& world);
double reward_preference(std::span<const double> x, const TaskWorld& world);
double reward_quality(std::span<const double> x, const TaskWorld& world);

/// p_data(x).
double mixture_density(std::span<const double> x, const TaskWorld& world);

/// Whether `task`'s reward is defined for samples generated under `c`.
/// Region and Ring need their own condition; Preference and Quality do not.
bool reward_applicable(TaskId task, const Condition& c);

/// Reward of `task`; throws std::invalid_argument when not applicable to c.
double task_reward(TaskId task, std::span<const double> x, const Condition& c,
                   const TaskWorld& world);

using RewardWeights = std::map<TaskId, double>;

/// Sum_k w_k r_k / Sum_k w_k over the entries of `rewards`.
double mix_reward(const std::map<TaskId, double>& rewards, const RewardWeights& weights);

/// mix_reward over the tasks in `weights` that apply to `c`.
double blended_reward(std::span<const double> x, const Condition& c, const TaskWorld& world,
                      const RewardWeights& weights);

inline constexpr double kAdvantageStdFloor = 1e-6;

/// (r - mean) / max(population std, floor). Identical rewards give exact zeros.
std::vector<double> group_advantage(std::span<const double> rewards,
                                    double std_floor = kAdvantageStdFloor);

/// One draw from mixture component k.
State sample_component(const TaskWorld& world, std::size_t k, Rng& rng);

/// One draw from p_data.
State sample_data(const TaskWorld& world, Rng& rng);

}  // namespace flowopd
