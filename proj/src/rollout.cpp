#include "flowopd/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "flowopd/error.hpp"
#include "flowopd/random.hpp"

namespace flowopd {

void Trajectory::validate() const {
    const std::size_t T = noises.size();
    if (T == 0 || times.size() != T + 1 || states.size() != T + 1 || logprobs.size() != T)
        throw std::invalid_argument("trajectory: inconsistent array lengths");
    for (std::size_t i = 0; i < T; ++i)
        if (!(times[i] > times[i + 1])) throw std::invalid_argument("trajectory: times not descending");
    for (const auto& s : states)
        if (s.size() != states.front().size()) throw std::invalid_argument("trajectory: ragged states");
}

Trajectory sample_trajectory(const ParamVector& params, const Condition& c, const TimeGrid& grid,
                             const NoiseSchedule& schedule, std::uint64_t rng_seed) {
    grid.validate();
    const std::size_t d = params.arch().output_dim;
    Trajectory tr;
    tr.times = grid.times();
    tr.condition = c;
    tr.schedule = schedule;
    tr.policy = policy_hash(params);
    tr.seed = rng_seed;
    tr.states.reserve(grid.steps + 1);
    tr.noises.reserve(grid.steps);
    tr.logprobs.reserve(grid.steps);

    State x(d);
    Rng(derive_seed(rng_seed, 0)).fill_normal(x);
    tr.states.push_back(x);
    std::vector<double> in(params.arch().input_dim);
    for (std::size_t j = 0; j < grid.steps; ++j) {
        const double t = tr.times[j];
        const double dt = tr.times[j] - tr.times[j + 1];
        const double s = sigma(t, schedule);
        model_input(params.arch(), x, t, c, in);
        const auto v = forward(params, in);
        State noise(d);
        Rng(derive_seed(rng_seed, j + 1)).fill_normal(noise);
        const auto mu = transition_mean(x, v, t, dt, s);
        State next = em_step(x, v, t, dt, s, noise);
        for (double xi : next) {
            if (!std::isfinite(xi)) {
                std::ostringstream os;
                os << "sample_trajectory: non-finite state at step " << j << " (t=" << t << ", "
                   << describe(c) << ", seed=" << rng_seed << ")";
                throw DivergenceError(os.str());
            }
        }
        tr.logprobs.push_back(transition_logprob(next, mu, transition_variance(s, dt)));
        tr.noises.push_back(std::move(noise));
        tr.states.push_back(next);
        x = std::move(next);
    }
    return tr;
}

Group sample_group(const ParamVector& params, const Condition& c, std::size_t group_size,
                   const TimeGrid& grid, const NoiseSchedule& schedule, std::uint64_t master_seed,
                   std::size_t threads) {
    if (group_size < 2) throw std::invalid_argument("sample_group: G must be at least 2");
    Group g;
    g.condition = c;
    g.policy = policy_hash(params);
    g.trajectories.resize(group_size);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < group_size; i += stride)
            g.trajectories[i] = sample_trajectory(params, c, grid, schedule, trajectory_seed(master_seed, i));
    };
    threads = std::clamp<std::size_t>(threads, 1, group_size);
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    }
    return g;
}

double accumulate_logprob_grad(const ParamVector& params, std::span<const double> x_t, double t,
                               double dt, double sigma_t, const Condition& c,
                               std::span<const double> x_next, double scale,
                               std::span<double> grad) {
    const auto in = model_input(params.arch(), x_t, t, c);
    const auto v = forward(params, in);
    const auto mu = transition_mean(x_t, v, t, dt, sigma_t);
    const double var = transition_variance(sigma_t, dt);
    // d log pi / d mu = (x_next - mu) / var, d mu / d v = -dt * gain
    const double dmu_dv = -dt * velocity_gain(t, sigma_t);
    std::vector<double> upstream(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) upstream[i] = scale * dmu_dv * (x_next[i] - mu[i]) / var;
    backward_accumulate(params, in, upstream, grad);
    return transition_logprob(x_next, mu, var);
}

namespace {

void check_replay(const ParamVector& params, const Trajectory& traj, std::size_t step) {
    traj.validate();
    if (step >= traj.steps()) throw std::invalid_argument("replay_logprob: step out of range");
    if (traj.states.front().size() != params.arch().output_dim)
        throw std::invalid_argument("replay_logprob: state dimension does not match model");
}

}  // namespace

double replay_accumulate(const ParamVector& params, const Trajectory& traj, std::size_t step,
                         double scale, std::span<double> grad) {
    check_replay(params, traj, step);
    const double t = traj.times[step];
    return accumulate_logprob_grad(params, traj.states[step], t, traj.dt(step),
                                   sigma(t, traj.schedule), traj.condition, traj.states[step + 1],
                                   scale, grad);
}

double replay_logprob_value(const ParamVector& params, const Trajectory& traj, std::size_t step) {
    check_replay(params, traj, step);
    const double t = traj.times[step];
    const double dt = traj.dt(step);
    const double s = sigma(t, traj.schedule);
    const auto mu = transition_mean(traj.states[step], velocity(params, traj.states[step], t, traj.condition),
                                    t, dt, s);
    return transition_logprob(traj.states[step + 1], mu, transition_variance(s, dt));
}

LogProbGrad replay_logprob(const ParamVector& params, const Trajectory& traj, std::size_t step) {
    LogProbGrad r{0.0, GradVector(params.size())};
    r.logprob = replay_accumulate(params, traj, step, 1.0, r.grad.values);
    return r;
}

void write_trajectory_table(std::ostream& os, const Trajectory& traj) {
    traj.validate();
    const std::size_t d = traj.states.front().size();
    os << "# condition " << describe(traj.condition) << " seed " << traj.seed << "\n";
    os << "step\tt";
    for (std::size_t i = 0; i < d; ++i) os << "\tx" << i;
    for (std::size_t i = 0; i < d; ++i) os << "\tnoise" << i;
    os << "\tlogprob\n";
    const auto old = os.precision(17);
    for (std::size_t j = 0; j < traj.times.size(); ++j) {
        os << j << '\t' << traj.times[j];
        for (double x : traj.states[j]) os << '\t' << x;
        if (j < traj.steps()) {
            for (double e : traj.noises[j]) os << '\t' << e;
            os << '\t' << traj.logprobs[j] << '\n';
        } else {
            for (std::size_t i = 0; i < d; ++i) os << "\t-";
            os << "\t-\n";
        }
    }
    os.precision(old);
}

}  // namespace flowopd
