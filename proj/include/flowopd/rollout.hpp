#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "flowopd/condition.hpp"
#include "flowopd/flow_core.hpp"
#include "flowopd/numgrad.hpp"
#include "flowopd/random.hpp"

namespace flowopd {

/// One SDE rollout. Immutable once sampled.
struct Trajectory {
    std::vector<double> times;     // T + 1 grid values, descending
    std::vector<State> states;     // T + 1
    std::vector<State> noises;     // T standard-normal draws
    std::vector<double> logprobs;  // T per-step log-densities
    Condition condition;
    NoiseSchedule schedule;
    std::uint64_t policy = 0;  // policy_hash of the sampling parameters
    std::uint64_t seed = 0;

    std::size_t steps() const { return noises.size(); }
    double dt(std::size_t step) const { return times.at(step) - times.at(step + 1); }
    const State& final_sample() const { return states.back(); }
    /// Throws std::invalid_argument when the stored arrays disagree.
    void validate() const;
};

struct Group {
    Condition condition;
    std::vector<Trajectory> trajectories;
    std::vector<double> rewards;  // empty until scored
    std::uint64_t policy = 0;

    std::size_t size() const { return trajectories.size(); }
    bool scored() const { return !rewards.empty() && rewards.size() == trajectories.size(); }
};

/// Initial state ~ N(0, I) and per-step noises come from derive_seed(rng_seed, step).
Trajectory sample_trajectory(const ParamVector& params, const Condition& c, const TimeGrid& grid,
                             const NoiseSchedule& schedule, std::uint64_t rng_seed);

/// Seed of trajectory i in a group.
inline std::uint64_t trajectory_seed(std::uint64_t master_seed, std::size_t i) {
    return derive_seed(master_seed, 0x7A11 + i);
}

/// G >= 2 trajectories; `threads` > 1 samples concurrently with identical results.
Group sample_group(const ParamVector& params, const Condition& c, std::size_t group_size,
                   const TimeGrid& grid, const NoiseSchedule& schedule, std::uint64_t master_seed,
                   std::size_t threads = 1);

struct LogProbGrad {
    double logprob = 0.0;
    GradVector grad;
};

/// Log-density of the stored x_{t-dt} under `params`' transition policy at
/// `step`, with its parameter gradient.
LogProbGrad replay_logprob(const ParamVector& params, const Trajectory& traj, std::size_t step);

/// grad += scale * d/dparams log pi(x_next | x_t). Returns the log-density.
double accumulate_logprob_grad(const ParamVector& params, std::span<const double> x_t, double t,
                               double dt, double sigma_t, const Condition& c,
                               std::span<const double> x_next, double scale,
                               std::span<double> grad);

/// Replayed log-density only (no gradient).
double replay_logprob_value(const ParamVector& params, const Trajectory& traj, std::size_t step);

double replay_accumulate(const ParamVector& params, const Trajectory& traj, std::size_t step,
                         double scale, std::span<double> grad);

/// Line-oriented dump: step, t, x_t, noise, logprob. The final row has no
/// transition, so its noise and logprob columns are "-".
void write_trajectory_table(std::ostream& os, const Trajectory& traj);

}  // namespace flowopd
