#pragma once

// Group-relative policy gradient on SDE rollouts: single-reward teachers,
// the mixed-reward baseline, and the gradient-interference probe.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowopd/error.hpp"
#include "flowopd/evaluation.hpp"
#include "flowopd/optim.hpp"
#include "flowopd/rewards.hpp"
#include "flowopd/rollout.hpp"

namespace flowopd {

enum class MixMode { ScalarMix, EpochInterleaved };

std::string_view mix_mode_name(MixMode mode);
MixMode parse_mix_mode(std::string_view name);

struct GrpoConfig {
    std::size_t group_size = 24;
    double learning_rate = 1e-3;
    std::size_t iterations = 500;
    double clip_range = 0.0;  // 0 = vanilla policy gradient
    std::size_t conditions_per_iter = 8;
    OptimizerKind optimizer = OptimizerKind::Sgd;
    double grad_clip = 10.0;
    std::size_t eval_every = 50;
    std::size_t epoch_length = 10;  // iterations per epoch in interleaved mixing
    /// Reward blend each teacher is trained on; tasks missing here use their own reward.
    std::map<TaskId, RewardWeights> teacher_rewards;
    std::uint64_t seed = 11;
    std::size_t threads = 1;

    void validate() const;
    RewardWeights teacher_reward(TaskId task) const;

    friend bool operator==(const GrpoConfig&, const GrpoConfig&) = default;
};

/// World, sampler and evaluation settings shared by every training loop.
struct TrainContext {
    TaskWorld world;
    TimeGrid grid;
    NoiseSchedule schedule;
    EvalConfig eval;
};

/// Thrown when a loop hits a non-finite gradient; carries the last finite parameters.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, ParamVector last_good)
        : DivergenceError(what), last_good_(std::move(last_good)) {}
    const ParamVector& last_good() const { return last_good_; }

private:
    ParamVector last_good_;
};

struct GrpoIterationStats {
    std::size_t iteration = 0;
    std::array<double, kNumTasks> train_reward{};  // NaN for tasks absent this iteration
    std::optional<EvalReport> eval;
    double loss = 0.0;  // clipped surrogate, negated
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

using GrpoCallback = std::function<void(const GrpoIterationStats&)>;

/// Fills group.rewards with `weights`-blended rewards of the final samples.
void score_group(Group& group, const TaskWorld& world, const RewardWeights& weights);

/// Ascent direction (1/|groups|) sum_g (1/G) sum_i A_i sum_steps grad log pi.
/// With clip_range > 0 each step's term uses the PPO-clipped ratio against the
/// stored log-probabilities. Throws OffPolicyError if any group was sampled by
/// other parameters and std::invalid_argument for unscored groups.
GradVector grpo_gradient(const ParamVector& params, std::span<const Group> groups,
                         double clip_range = 0.0);

ParamVector train_teacher(const ParamVector& init, TaskId task, const GrpoConfig& config,
                          const TrainContext& ctx, const GrpoCallback& callback = {});

/// Multi-reward baseline. ScalarMix: every iteration draws conditions over all
/// tasks with nonzero ratio and scores with the ratio-weighted reward.
/// EpochInterleaved: epochs of `epoch_length` iterations cycle through tasks in
/// proportion to the (integer-rounded) ratios, each epoch using one task's
/// conditions and reward.
ParamVector train_mix(const ParamVector& init, const GrpoConfig& config, MixMode mode,
                      const RewardWeights& ratios, const TrainContext& ctx,
                      const GrpoCallback& callback = {});

struct InterferenceReport {
    double inner_product = 0.0;
    std::optional<double> cosine;  // unset when either gradient vanishes
    double norm_a = 0.0;
    double norm_b = 0.0;
};

InterferenceReport interference_from_gradients(const GradVector& a, const GradVector& b);

/// Estimates <grad J_A, grad J_B> at `params` from GRPO gradients of each task
/// on `probe_groups` groups of its own conditions. Both tasks use the same
/// probe seeds.
InterferenceReport gradient_interference(const ParamVector& params, TaskId task_a, TaskId task_b,
                                         std::size_t probe_groups, std::size_t group_size,
                                         const TrainContext& ctx, std::uint64_t seed);

using SampleReward = std::function<double(const Trajectory&)>;

/// Same estimate for arbitrary per-trajectory rewards on a fixed condition list.
InterferenceReport gradient_interference(const ParamVector& params,
                                         std::span<const Condition> conditions,
                                         const SampleReward& reward_a, const SampleReward& reward_b,
                                         std::size_t group_size, const TimeGrid& grid,
                                         const NoiseSchedule& schedule, std::uint64_t seed);

}  // namespace flowopd
