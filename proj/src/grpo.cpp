#include "flowopd/grpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace flowopd {

std::string_view mix_mode_name(MixMode mode) {
    return mode == MixMode::ScalarMix ? "scalar-mix" : "epoch-interleaved";
}

MixMode parse_mix_mode(std::string_view name) {
    if (name == "scalar-mix") return MixMode::ScalarMix;
    if (name == "epoch-interleaved") return MixMode::EpochInterleaved;
    throw std::invalid_argument("unknown mix mode '" + std::string(name) + "'");
}

void GrpoConfig::validate() const {
    if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be >= 2");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("GrpoConfig: learning_rate must be > 0");
    if (clip_range < 0.0) throw std::invalid_argument("GrpoConfig: clip_range must be >= 0");
    if (conditions_per_iter == 0) throw std::invalid_argument("GrpoConfig: conditions_per_iter must be > 0");
    if (epoch_length == 0) throw std::invalid_argument("GrpoConfig: epoch_length must be > 0");
}

RewardWeights GrpoConfig::teacher_reward(TaskId task) const {
    auto it = teacher_rewards.find(task);
    if (it != teacher_rewards.end()) return it->second;
    return {{task, 1.0}};
}

void score_group(Group& group, const TaskWorld& world, const RewardWeights& weights) {
    group.rewards.clear();
    group.rewards.reserve(group.size());
    for (const auto& tr : group.trajectories)
        group.rewards.push_back(blended_reward(tr.final_sample(), group.condition, world, weights));
}

GradVector grpo_gradient(const ParamVector& params, std::span<const Group> groups, double clip_range) {
    GradVector grad(params.size());
    if (groups.empty()) return grad;
    const std::uint64_t h = policy_hash(params);
    for (const auto& g : groups) {
        if (!g.scored()) throw std::invalid_argument("grpo_gradient: group rewards are unset");
        if (g.policy != h) throw OffPolicyError("grpo_gradient: group was sampled by different parameters");
    }
    const double norm = 1.0 / static_cast<double>(groups.size());
    for (const auto& g : groups) {
        const auto adv = group_advantage(g.rewards);
        const double per_traj = norm / static_cast<double>(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (adv[i] == 0.0) continue;
            const auto& tr = g.trajectories[i];
            for (std::size_t j = 0; j < tr.steps(); ++j) {
                double scale = adv[i] * per_traj;
                if (clip_range > 0.0) {
                    const double ratio = std::exp(replay_logprob_value(params, tr, j) - tr.logprobs[j]);
                    const bool clipped = (adv[i] > 0.0 && ratio > 1.0 + clip_range) ||
                                         (adv[i] < 0.0 && ratio < 1.0 - clip_range);
                    if (clipped) continue;
                    scale *= ratio;
                }
                replay_accumulate(params, tr, j, scale, grad.values);
            }
        }
    }
    return grad;
}

namespace {

struct IterationPlan {
    std::vector<Condition> conditions;
    RewardWeights weights;
};

using Planner = std::function<IterationPlan(std::size_t iteration, Rng& rng)>;

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

ParamVector run_grpo(const ParamVector& init, const GrpoConfig& config, const TrainContext& ctx,
                     const Planner& plan, const GrpoCallback& callback) {
    config.validate();
    ParamVector params = init;
    Optimizer opt({config.optimizer, config.learning_rate, config.grad_clip}, params.size());
    const double start = now_seconds();
    for (std::size_t it = 0; it < config.iterations; ++it) {
        Rng rng(derive_seed(config.seed, 0x6790, it));
        auto p = plan(it, rng);
        std::vector<Group> groups;
        groups.reserve(p.conditions.size());
        GrpoIterationStats stats;
        stats.iteration = it;
        std::array<double, kNumTasks> sums{};
        std::array<std::size_t, kNumTasks> counts{};
        double blended_sum = 0.0;
        std::size_t blended_n = 0;
        for (std::size_t j = 0; j < p.conditions.size(); ++j) {
            auto g = sample_group(params, p.conditions[j], config.group_size, ctx.grid, ctx.schedule,
                                  derive_seed(config.seed, it + 1, j), config.threads);
            score_group(g, ctx.world, p.weights);
            const auto task = static_cast<std::size_t>(g.condition.task);
            for (std::size_t i = 0; i < g.size(); ++i) {
                sums[task] += task_reward(g.condition.task, g.trajectories[i].final_sample(),
                                          g.condition, ctx.world);
                ++counts[task];
                blended_sum += g.rewards[i];
                ++blended_n;
            }
            groups.push_back(std::move(g));
        }
        const auto grad = grpo_gradient(params, groups, config.clip_range);
        if (!grad.all_finite())
            throw TrainingDiverged("GRPO gradient became non-finite at iteration " + std::to_string(it),
                                   params);
        GradVector descent = grad;
        descent *= -1.0;
        stats.grad_norm = opt.step(params, descent);
        for (std::size_t k = 0; k < kNumTasks; ++k)
            stats.train_reward[k] = counts[k] ? sums[k] / static_cast<double>(counts[k])
                                              : std::numeric_limits<double>::quiet_NaN();
        stats.loss = -blended_sum / static_cast<double>(std::max<std::size_t>(blended_n, 1));
        if (callback) {
            const bool last = it + 1 == config.iterations;
            if (config.eval_every > 0 && ((it + 1) % config.eval_every == 0 || last))
                stats.eval = evaluate(params, ctx.world, ctx.schedule, ctx.eval);
            stats.wall_seconds = now_seconds() - start;
            callback(stats);
        }
    }
    return params;
}

}  // namespace

ParamVector train_teacher(const ParamVector& init, TaskId task, const GrpoConfig& config,
                          const TrainContext& ctx, const GrpoCallback& callback) {
    const std::array<TaskId, 1> tasks{task};
    const RewardWeights weights = config.teacher_reward(task);
    return run_grpo(init, config, ctx,
                    [&](std::size_t, Rng& rng) {
                        return IterationPlan{
                            draw_conditions(ctx.world, tasks, config.conditions_per_iter, rng), weights};
                    },
                    callback);
}

ParamVector train_mix(const ParamVector& init, const GrpoConfig& config, MixMode mode,
                      const RewardWeights& ratios, const TrainContext& ctx,
                      const GrpoCallback& callback) {
    std::vector<TaskId> active;
    for (const auto& [task, w] : ratios) {
        if (w < 0.0) throw std::invalid_argument("train_mix: negative ratio");
        if (w > 0.0) active.push_back(task);
    }
    if (active.empty()) throw std::invalid_argument("train_mix: all ratios are zero");

    if (mode == MixMode::ScalarMix) {
        // a lone task keeps weight 1 so w r / w rounding cannot creep in
        const RewardWeights weights = active.size() == 1 ? RewardWeights{{active[0], 1.0}} : ratios;
        return run_grpo(init, config, ctx,
                        [&](std::size_t, Rng& rng) {
                            return IterationPlan{
                                draw_conditions(ctx.world, active, config.conditions_per_iter, rng), weights};
                        },
                        callback);
    }

    std::vector<TaskId> cycle;
    for (TaskId t : active) {
        const auto reps = std::max<long long>(1, std::llround(ratios.at(t)));
        for (long long r = 0; r < reps; ++r) cycle.push_back(t);
    }
    return run_grpo(init, config, ctx,
                    [&](std::size_t it, Rng& rng) {
                        const TaskId task = cycle[(it / config.epoch_length) % cycle.size()];
                        const std::array<TaskId, 1> one{task};
                        return IterationPlan{draw_conditions(ctx.world, one, config.conditions_per_iter, rng),
                                             RewardWeights{{task, 1.0}}};
                    },
                    callback);
}

InterferenceReport interference_from_gradients(const GradVector& a, const GradVector& b) {
    InterferenceReport r;
    r.inner_product = dot(a, b);
    r.norm_a = a.norm();
    r.norm_b = b.norm();
    if (r.norm_a > 0.0 && r.norm_b > 0.0)
        r.cosine = std::clamp(r.inner_product / (r.norm_a * r.norm_b), -1.0, 1.0);
    return r;
}

namespace {

GradVector task_gradient(const ParamVector& params, TaskId task, std::size_t probe_groups,
                         std::size_t group_size, const TrainContext& ctx, std::uint64_t seed) {
    // templates cycled in order so every probe set is balanced
    const auto templates = ctx.world.conditions(task);
    std::vector<Group> groups;
    for (std::size_t j = 0; j < probe_groups; ++j) {
        auto g = sample_group(params, templates[j % templates.size()], group_size, ctx.grid, ctx.schedule,
                              derive_seed(seed, 0x9A, j));
        score_group(g, ctx.world, {{task, 1.0}});
        groups.push_back(std::move(g));
    }
    return grpo_gradient(params, groups);
}

}  // namespace

InterferenceReport gradient_interference(const ParamVector& params, TaskId task_a, TaskId task_b,
                                         std::size_t probe_groups, std::size_t group_size,
                                         const TrainContext& ctx, std::uint64_t seed) {
    if (probe_groups == 0) throw std::invalid_argument("gradient_interference: need probe groups");
    return interference_from_gradients(task_gradient(params, task_a, probe_groups, group_size, ctx, seed),
                                       task_gradient(params, task_b, probe_groups, group_size, ctx, seed));
}

InterferenceReport gradient_interference(const ParamVector& params,
                                         std::span<const Condition> conditions,
                                         const SampleReward& reward_a, const SampleReward& reward_b,
                                         std::size_t group_size, const TimeGrid& grid,
                                         const NoiseSchedule& schedule, std::uint64_t seed) {
    std::vector<Group> ga, gb;
    for (std::size_t j = 0; j < conditions.size(); ++j) {
        auto g = sample_group(params, conditions[j], group_size, grid, schedule, derive_seed(seed, 0x9A, j));
        Group other = g;
        for (const auto& tr : g.trajectories) {
            g.rewards.push_back(reward_a(tr));
            other.rewards.push_back(reward_b(tr));
        }
        ga.push_back(std::move(g));
        gb.push_back(std::move(other));
    }
    return interference_from_gradients(grpo_gradient(params, ga), grpo_gradient(params, gb));
}

}  // namespace flowopd
