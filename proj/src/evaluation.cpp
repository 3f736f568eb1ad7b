#include "flowopd/evaluation.hpp"

#include <numeric>
#include <stdexcept>

#include "flowopd/rollout.hpp"

namespace flowopd {

double EvalReport::normalized_average() const {
    return std::accumulate(task_reward.begin(), task_reward.end(), 0.0) /
           static_cast<double>(task_reward.size());
}

double evaluate_task(const ParamVector& params, TaskId task, const TaskWorld& world,
                     const NoiseSchedule& schedule, const EvalConfig& config) {
    const auto conds = world.conditions(task);
    if (config.samples_per_task < conds.size())
        throw std::invalid_argument("evaluate: fewer samples than condition templates");
    const std::size_t per = config.samples_per_task / conds.size();
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t ci = 0; ci < conds.size(); ++ci) {
        const std::uint64_t cond_seed =
            derive_seed(config.seed, 0xE7A1 + static_cast<std::uint64_t>(task), ci);
        for (std::size_t i = 0; i < per; ++i) {
            const auto tr = sample_trajectory(params, conds[ci], config.grid, schedule,
                                              derive_seed(cond_seed, i));
            total += task_reward(task, tr.final_sample(), conds[ci], world);
            ++n;
        }
    }
    return total / static_cast<double>(n);
}

EvalReport evaluate(const ParamVector& params, const TaskWorld& world,
                    const NoiseSchedule& schedule, const EvalConfig& config) {
    EvalReport r;
    for (TaskId t : kAllTasks) r[t] = evaluate_task(params, t, world, schedule, config);
    return r;
}

std::vector<Condition> draw_conditions(const TaskWorld& world, std::span<const TaskId> tasks,
                                       std::size_t n, Rng& rng) {
    if (tasks.empty()) throw std::invalid_argument("draw_conditions: no tasks");
    std::vector<Condition> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TaskId task = tasks[rng.below(tasks.size())];
        const auto templates = world.conditions(task);
        out.push_back(templates[rng.below(templates.size())]);
    }
    return out;
}

}  // namespace flowopd
