#include "flowopd/opd.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "flowopd/error.hpp"
#include "flowopd/fm_training.hpp"
#include "flowopd/random.hpp"

namespace flowopd {

RoutingTable RoutingTable::by_task_name() {
    RoutingTable r;
    for (TaskId t : kAllTasks) r.set(t, std::string(task_name(t)));
    return r;
}

const std::string& route(const Condition& c, const RoutingTable& table) {
    auto it = table.entries().find(c.task);
    if (it == table.entries().end())
        throw RoutingError("no expert routed for task '" + std::string(task_name(c.task)) + "'");
    return it->second;
}

const ParamVector& TeacherEnsemble::expert_for(const Condition& c) const {
    const auto& key = route(c, routing);
    auto it = experts.find(key);
    if (it == experts.end()) throw RoutingError("routed expert '" + key + "' is missing");
    return it->second;
}

void TeacherEnsemble::validate(const ArchSpec& student) const {
    if (routing.entries().empty()) throw RoutingError("ensemble has an empty routing table");
    for (const auto& [task, key] : routing.entries())
        if (!experts.count(key)) throw RoutingError("routed expert '" + key + "' is missing");
    for (const auto& [key, p] : experts)
        if (!(p.arch() == student))
            throw std::invalid_argument("expert '" + key + "' architecture differs from the student");
    if (anchor && !(anchor->arch() == student))
        throw std::invalid_argument("anchor architecture differs from the student");
}

std::vector<TaskId> TeacherEnsemble::routed_tasks() const {
    std::vector<TaskId> out;
    for (const auto& [task, key] : routing.entries()) out.push_back(task);
    return out;
}

State target_velocity(const TeacherEnsemble& ensemble, const Condition& c,
                      std::span<const double> x_t, double t) {
    return velocity(ensemble.expert_for(c), x_t, t, c);
}

std::string_view anchor_scope_name(AnchorScope scope) {
    return scope == AnchorScope::FullData ? "full-data" : "on-policy-states";
}

AnchorScope parse_anchor_scope(std::string_view name) {
    if (name == "full-data") return AnchorScope::FullData;
    if (name == "on-policy-states") return AnchorScope::OnPolicyStates;
    throw std::invalid_argument("unknown anchor scope '" + std::string(name) + "'");
}

void OpdConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("OpdConfig: lambda must be >= 0");
    if (group_size < 2) throw std::invalid_argument("OpdConfig: group_size must be >= 2");
    if (conditions_per_iter == 0) throw std::invalid_argument("OpdConfig: conditions_per_iter must be > 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("OpdConfig: learning_rate must be > 0");
    if (anchor_scope == AnchorScope::FullData && lambda > 0.0 && mar_probes == 0)
        throw std::invalid_argument("OpdConfig: full-data anchoring needs mar_probes > 0");
}

namespace {

void check_on_policy(const ParamVector& student, std::span<const Group> groups) {
    const auto h = policy_hash(student);
    for (const auto& g : groups) {
        if (g.policy != h) throw OffPolicyError("groups were not sampled by the current student");
        for (const auto& tr : g.trajectories)
            if (tr.policy != h) throw OffPolicyError("trajectory was not sampled by the current student");
    }
}

std::size_t visited_states(std::span<const Group> groups) {
    std::size_t n = 0;
    for (const auto& g : groups)
        for (const auto& tr : g.trajectories) n += tr.steps();
    return n;
}

// Adds scale * w ||v - target||^2 and its gradient; returns the unscaled term.
double accumulate_regression(const ParamVector& student, std::span<const double> x, double t, double w,
                             const Condition& c, std::span<const double> target, double scale,
                             std::span<double> grad) {
    const auto in = model_input(student.arch(), x, t, c);
    const auto v = forward(student, in);
    std::vector<double> upstream(v.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double diff = v[i] - target[i];
        sq += diff * diff;
        upstream[i] = scale * 2.0 * w * diff;
    }
    backward_accumulate(student, in, upstream, grad);
    return w * sq;
}

}  // namespace

LossAndGrad flow_opd_loss(const ParamVector& student, const TeacherEnsemble& ensemble,
                          std::span<const Group> groups) {
    check_on_policy(student, groups);
    LossAndGrad out{0.0, GradVector(student.size())};
    const std::size_t n = visited_states(groups);
    if (n == 0) return out;
    const double scale = 1.0 / static_cast<double>(n);
    for (const auto& g : groups) {
        const auto& teacher = ensemble.expert_for(g.condition);
        for (const auto& tr : g.trajectories) {
            for (std::size_t j = 0; j < tr.steps(); ++j) {
                const double t = tr.times[j];
                const double dt = tr.dt(j);
                const double w = weight_w(t, sigma(t, tr.schedule), dt);
                const auto target = velocity(teacher, tr.states[j], t, g.condition);
                out.value += accumulate_regression(student, tr.states[j], t, w, g.condition, target, scale,
                                                   out.grad.values);
            }
        }
    }
    out.value *= scale;
    return out;
}

PgOpdGradient pg_opd_gradient(const ParamVector& student, const TeacherEnsemble& ensemble,
                              std::span<const Group> groups) {
    check_on_policy(student, groups);
    PgOpdGradient out{GradVector(student.size()), GradVector(student.size()), 0.0};
    const std::size_t n = visited_states(groups);
    if (n == 0) return out;
    const double scale = 1.0 / static_cast<double>(n);
    for (const auto& g : groups) {
        const auto& teacher = ensemble.expert_for(g.condition);
        for (const auto& tr : g.trajectories) {
            for (std::size_t j = 0; j < tr.steps(); ++j) {
                const double t = tr.times[j];
                const double dt = tr.dt(j);
                const double s = sigma(t, tr.schedule);
                const auto& x = tr.states[j];
                const auto in = model_input(student.arch(), x, t, g.condition);
                const auto v = forward(student, in);
                const auto mu = transition_mean(x, v, t, dt, s);
                const auto mu_tgt = transition_mean(x, velocity(teacher, x, t, g.condition), t, dt, s);
                const double kl = kl_means(mu, mu_tgt, s, dt);
                out.mean_kl += kl * scale;

                accumulate_logprob_grad(student, x, t, dt, s, g.condition, tr.states[j + 1], -kl * scale,
                                        out.score_term.values);

                // d(-KL)/dmu = -(mu - mu_tgt) / var and dmu/dv = -dt * gain
                const double var = transition_variance(s, dt);
                const double dmu_dv = -dt * velocity_gain(t, s);
                std::vector<double> upstream(v.size());
                for (std::size_t i = 0; i < v.size(); ++i)
                    upstream[i] = scale * (-(mu[i] - mu_tgt[i]) / var) * dmu_dv;
                backward_accumulate(student, in, upstream, out.direct_term.values);
            }
        }
    }
    return out;
}

bool ScoreNullityReport::within(double k) const {
    if (samples == 0) return false;
    return mean_norm <= k * std_norm / std::sqrt(static_cast<double>(samples));
}

ScoreNullityReport score_term_nullity(const ParamVector& student, const TeacherEnsemble& ensemble,
                                      std::span<const double> x_t, double t, double dt,
                                      const Condition& c, const NoiseSchedule& schedule,
                                      std::size_t n, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("score_term_nullity: need at least two actions");
    const double s = sigma(t, schedule);
    const auto v = velocity(student, x_t, t, c);
    const auto mu = transition_mean(x_t, v, t, dt, s);
    const auto mu_tgt = transition_mean(x_t, target_velocity(ensemble, c, x_t, t), t, dt, s);
    const double signal = -kl_means(mu, mu_tgt, s, dt);
    const double sd = std::sqrt(transition_variance(s, dt));

    const std::size_t P = student.size();
    std::vector<double> sum(P, 0.0), sumsq(P, 0.0);
    std::vector<double> g(P);
    State a(x_t.size());
    Rng rng(derive_seed(seed, 0x5C0));
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = mu[i] + sd * rng.normal();
        std::fill(g.begin(), g.end(), 0.0);
        accumulate_logprob_grad(student, x_t, t, dt, s, c, a, signal, g);
        for (std::size_t p = 0; p < P; ++p) {
            sum[p] += g[p];
            sumsq[p] += g[p] * g[p];
        }
    }
    ScoreNullityReport r;
    r.samples = n;
    r.mean = GradVector(P);
    r.stddev.resize(P);
    const double dn = static_cast<double>(n);
    double mn = 0.0, sn = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        const double m = sum[p] / dn;
        const double var = std::max(0.0, sumsq[p] / dn - m * m);
        r.mean.values[p] = m;
        r.stddev[p] = std::sqrt(var);
        mn += m * m;
        sn += var;
    }
    r.mean_norm = std::sqrt(mn);
    r.std_norm = std::sqrt(sn);
    return r;
}

std::vector<ProbeState> on_policy_probes(std::span<const Group> groups) {
    std::vector<ProbeState> out;
    for (const auto& g : groups)
        for (const auto& tr : g.trajectories)
            for (std::size_t j = 0; j < tr.steps(); ++j)
                out.push_back({tr.states[j], tr.times[j], tr.dt(j), g.condition});
    return out;
}

std::vector<ProbeState> full_data_probes(const TaskWorld& world, const TimeGrid& grid,
                                         std::size_t n, std::uint64_t seed) {
    grid.validate();
    const auto source = world_data_source(world);
    const auto times = grid.times();
    Rng rng(derive_seed(seed, 0xF0D));
    std::vector<ProbeState> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto d = source(rng);
        State noise(d.x.size());
        rng.fill_normal(noise);
        const std::size_t j = rng.below(grid.steps);
        const double t = times[j];
        out.push_back({ot_interpolate(d.x, noise, t), t, times[j] - times[j + 1], std::move(d.condition)});
    }
    return out;
}

LossAndGrad mar_loss(const ParamVector& student, const ParamVector& anchor,
                     std::span<const ProbeState> probes, const NoiseSchedule& schedule) {
    if (probes.empty()) throw std::invalid_argument("mar_loss: no probe states");
    if (!(anchor.arch() == student.arch()))
        throw std::invalid_argument("mar_loss: anchor architecture differs from the student");
    LossAndGrad out{0.0, GradVector(student.size())};
    const double scale = 1.0 / static_cast<double>(probes.size());
    for (const auto& p : probes) {
        const double w = weight_w(p.t, sigma(p.t, schedule), p.dt);
        const auto target = velocity(anchor, p.x_t, p.t, p.condition);
        out.value += accumulate_regression(student, p.x_t, p.t, w, p.condition, target, scale,
                                           out.grad.values);
    }
    out.value *= scale;
    return out;
}

double anchor_discrepancy(const ParamVector& student, const ParamVector& anchor,
                          std::span<const ProbeState> probes, const NoiseSchedule& schedule) {
    if (probes.empty()) throw std::invalid_argument("anchor_discrepancy: no probe states");
    double total = 0.0;
    for (const auto& p : probes)
        total += kl_velocities(velocity(student, p.x_t, p.t, p.condition),
                               velocity(anchor, p.x_t, p.t, p.condition), p.t, sigma(p.t, schedule), p.dt);
    return total / static_cast<double>(probes.size());
}

OpdLoss total_loss(const ParamVector& student, const TeacherEnsemble& ensemble,
                   std::span<const Group> groups, std::span<const ProbeState> probes,
                   const OpdConfig& config) {
    auto opd = flow_opd_loss(student, ensemble, groups);
    OpdLoss out{opd.value, 0.0, opd.value, std::move(opd.grad)};
    if (config.lambda > 0.0) {
        if (!ensemble.anchor) throw std::invalid_argument("total_loss: lambda > 0 needs an anchor");
        const NoiseSchedule schedule =
            groups.empty() || groups.front().trajectories.empty() ? NoiseSchedule{}
                                                                  : groups.front().trajectories.front().schedule;
        const auto mar = mar_loss(student, *ensemble.anchor, probes, schedule);
        out.mar = mar.value;
        out.total += config.lambda * mar.value;
        out.grad.axpy(config.lambda, mar.grad);
    }
    return out;
}

ParamVector train_student(const ParamVector& cold, const TeacherEnsemble& ensemble,
                          const OpdConfig& config, const TrainContext& ctx,
                          const OpdCallback& callback) {
    config.validate();
    ensemble.validate(cold.arch());
    if (config.lambda > 0.0 && !ensemble.anchor)
        throw std::invalid_argument("train_student: lambda > 0 needs an anchor");
    const auto tasks = ensemble.routed_tasks();
    // fixed probe set for monitoring, disjoint seed from the training probes
    const auto monitor = ensemble.anchor ? full_data_probes(ctx.world, ctx.grid, 512, derive_seed(config.seed, 0xA11))
                                         : std::vector<ProbeState>{};

    ParamVector params = cold;
    Optimizer opt({config.optimizer, config.learning_rate, config.grad_clip}, params.size());
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t it = 0; it < config.iterations; ++it) {
        Rng rng(derive_seed(config.seed, 0x0BD, it));
        const auto conds = draw_conditions(ctx.world, tasks, config.conditions_per_iter, rng);
        std::vector<Group> groups;
        groups.reserve(conds.size());
        for (std::size_t j = 0; j < conds.size(); ++j)
            groups.push_back(sample_group(params, conds[j], config.group_size, ctx.grid, ctx.schedule,
                                          derive_seed(config.seed, it + 1, j), config.threads));
        std::vector<ProbeState> probes;
        if (config.lambda > 0.0)
            probes = config.anchor_scope == AnchorScope::FullData
                         ? full_data_probes(ctx.world, ctx.grid, config.mar_probes, derive_seed(config.seed, 0x9B0, it))
                         : on_policy_probes(groups);
        const auto loss = total_loss(params, ensemble, groups, probes, config);
        if (!std::isfinite(loss.total) || !loss.grad.all_finite())
            throw TrainingDiverged("OPD loss became non-finite at iteration " + std::to_string(it), params);
        OpdIterationStats stats;
        stats.iteration = it;
        stats.opd_loss = loss.opd;
        stats.mar_loss = loss.mar;
        stats.grad_norm = opt.step(params, loss.grad);
        if (callback) {
            const bool last = it + 1 == config.iterations;
            if (config.eval_every > 0 && ((it + 1) % config.eval_every == 0 || last)) {
                stats.eval = evaluate(params, ctx.world, ctx.schedule, ctx.eval);
                if (ensemble.anchor)
                    stats.anchor_discrepancy = anchor_discrepancy(params, *ensemble.anchor, monitor, ctx.schedule);
            }
            stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            callback(stats);
        }
    }
    return params;
}

}  // namespace flowopd
