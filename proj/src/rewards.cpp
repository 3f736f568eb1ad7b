#include "flowopd/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "flowopd/flow_core.hpp"

namespace flowopd {

bool operator==(const MixtureComponent& a, const MixtureComponent& b) {
    return a.mean == b.mean && a.scale == b.scale && a.weight == b.weight;
}

void TaskWorld::validate() const {
    if (mixture.empty()) throw std::invalid_argument("TaskWorld: empty mixture");
    const std::size_t d = dim();
    double total = 0.0;
    for (const auto& m : mixture) {
        if (m.mean.size() != d) throw std::invalid_argument("TaskWorld: ragged component means");
        if (!(m.scale > 0.0)) throw std::invalid_argument("TaskWorld: component scale must be positive");
        if (m.weight < 0.0) throw std::invalid_argument("TaskWorld: negative component weight");
        total += m.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("TaskWorld: weights must sum to 1");
    if (preference_center.size() != d)
        throw std::invalid_argument("TaskWorld: preference center dimension");
    if (!(preference_scale > 0.0 && region_tau > 0.0 && ring_tau > 0.0 && ring_radius > 0.0))
        throw std::invalid_argument("TaskWorld: reward scales must be positive");
    if (!region_labels.empty() && region_labels.size() != mixture.size())
        throw std::invalid_argument("TaskWorld: one region label per component");
}

std::vector<Condition> TaskWorld::conditions(TaskId task) const {
    std::vector<Condition> out;
    const std::size_t n = components();
    switch (task) {
        case TaskId::Region:
            for (std::size_t k = 0; k < n; ++k) out.push_back(Condition::region(k, n));
            break;
        case TaskId::Ring: out.push_back(Condition::ring(ring_radius)); break;
        case TaskId::Preference:
            for (std::size_t k = 0; k < n; ++k) out.push_back(Condition::preference(k, n));
            break;
        case TaskId::Quality:
            for (std::size_t k = 0; k < n; ++k) out.push_back(Condition::quality(k, n));
            break;
    }
    return out;
}

TaskWorld default_world() {
    TaskWorld w;
    w.mixture = {{{3.0, 3.0}, 1.0, 0.25},
                 {{3.0, -3.0}, 1.0, 0.25},
                 {{-3.0, 3.0}, 1.0, 0.25},
                 {{-3.0, -3.0}, 1.0, 0.25}};
    w.region_labels = {"NE", "SE", "NW", "SW"};
    w.preference_center = {4.5, 4.5};
    w.preference_scale = 0.5;
    w.region_tau = 1.0;
    w.ring_radius = 3.0 * std::numbers::sqrt2;
    w.ring_tau = 0.5;
    return w;
}

namespace {

double norm2(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

void require_task(const Condition& c, TaskId task, const char* what) {
    if (c.task != task) throw std::invalid_argument(std::string(what) + ": wrong task id for condition");
}

}  // namespace

double reward_region(std::span<const double> x, const Condition& c, const TaskWorld& world) {
    require_task(c, TaskId::Region, "reward_region");
    const auto& target = world.mixture.at(c.content_index()).mean;
    return std::exp(-squared_distance(x, target) / (2.0 * world.region_tau * world.region_tau));
}

double reward_ring(std::span<const double> x, const Condition& c, const TaskWorld& world) {
    require_task(c, TaskId::Ring, "reward_ring");
    const double dr = std::sqrt(norm2(x)) - c.radius();
    return std::exp(-dr * dr / (2.0 * world.ring_tau * world.ring_tau));
}

double reward_preference(std::span<const double> x, const TaskWorld& world) {
    const double s = world.preference_scale;
    return std::exp(-squared_distance(x, world.preference_center) / (2.0 * s * s));
}

double mixture_density(std::span<const double> x, const TaskWorld& world) {
    const double d = static_cast<double>(world.dim());
    double p = 0.0;
    for (const auto& m : world.mixture) {
        const double var = m.scale * m.scale;
        p += m.weight * std::exp(-squared_distance(x, m.mean) / (2.0 * var)) /
             std::pow(2.0 * std::numbers::pi * var, 0.5 * d);
    }
    return p;
}

double reward_quality(std::span<const double> x, const TaskWorld& world) {
    const double d = static_cast<double>(world.dim());
    double peak = 0.0;
    for (const auto& m : world.mixture)
        peak = std::max(peak, m.weight / std::pow(2.0 * std::numbers::pi * m.scale * m.scale, 0.5 * d));
    return std::min(1.0, mixture_density(x, world) / peak);
}

bool reward_applicable(TaskId task, const Condition& c) {
    switch (task) {
        case TaskId::Region:
        case TaskId::Ring: return c.task == task;
        case TaskId::Preference:
        case TaskId::Quality: return true;
    }
    return false;
}

double task_reward(TaskId task, std::span<const double> x, const Condition& c,
                   const TaskWorld& world) {
    switch (task) {
        case TaskId::Region: return reward_region(x, c, world);
        case TaskId::Ring: return reward_ring(x, c, world);
        case TaskId::Preference: return reward_preference(x, world);
        case TaskId::Quality: return reward_quality(x, world);
    }
    throw std::invalid_argument("task_reward: unknown task");
}

double mix_reward(const std::map<TaskId, double>& rewards, const RewardWeights& weights) {
    if (rewards.empty()) throw std::invalid_argument("mix_reward: empty reward map");
    double num = 0.0, den = 0.0;
    for (const auto& [task, r] : rewards) {
        auto it = weights.find(task);
        const double w = it == weights.end() ? 0.0 : it->second;
        if (w < 0.0) throw std::invalid_argument("mix_reward: negative weight");
        num += w * r;
        den += w;
    }
    if (!(den > 0.0)) throw std::invalid_argument("mix_reward: all weights are zero");
    return num / den;
}

double blended_reward(std::span<const double> x, const Condition& c, const TaskWorld& world,
                      const RewardWeights& weights) {
    std::map<TaskId, double> rewards;
    for (const auto& [task, w] : weights)
        if (w > 0.0 && reward_applicable(task, c)) rewards[task] = task_reward(task, x, c, world);
    if (rewards.empty())
        throw std::invalid_argument("blended_reward: no weighted reward applies to " + describe(c));
    return mix_reward(rewards, weights);
}

std::vector<double> group_advantage(std::span<const double> rewards, double std_floor) {
    if (rewards.size() < 2) throw std::invalid_argument("group_advantage: need at least 2 rewards");
    std::vector<double> adv(rewards.size(), 0.0);
    if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; }))
        return adv;
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::max(std::sqrt(var / n), std_floor);
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
    return adv;
}

State sample_component(const TaskWorld& world, std::size_t k, Rng& rng) {
    const auto& m = world.mixture.at(k);
    State x(m.mean.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = m.mean[i] + m.scale * rng.normal();
    return x;
}

State sample_data(const TaskWorld& world, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t k = world.components() - 1;
    for (std::size_t i = 0; i < world.components(); ++i) {
        acc += world.mixture[i].weight;
        if (u < acc) {
            k = i;
            break;
        }
    }
    return sample_component(world, k, rng);
}

}  // namespace flowopd
