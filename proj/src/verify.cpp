#include "flowopd/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/Dense>

#include "flowopd/coldstart.hpp"
#include "flowopd/opd.hpp"

namespace flowopd {

bool VerifyReport::all_passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::string format_check(const CheckResult& c) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%-4s %-28s measured %.3e  tol %.3e  (%.2fs)  %s", c.passed ? "ok" : "FAIL",
                  c.name.c_str(), c.measured, c.tolerance, c.seconds, c.detail.c_str());
    return buf;
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

CheckResult at_most(std::string name, double measured, double tol, std::string detail, Clock::time_point t0) {
    return {std::move(name), measured, tol, std::isfinite(measured) && measured <= tol, std::move(detail), since(t0)};
}

ArchSpec small_arch(const ExperimentConfig& config, const VerifyOptions& opt) {
    ArchSpec a = config.arch();
    a.hidden_widths = opt.hidden_widths;
    return a;
}

// init_params is tuned for training; a wider spread exercises the tanh curvature.
ParamVector random_params(const ArchSpec& arch, std::uint64_t seed, double scale = 0.6) {
    ParamVector p(arch);
    Rng rng(seed);
    for (auto& v : p.values()) v = scale * rng.normal();
    return p;
}

Condition random_condition(const TaskWorld& world, Rng& rng) {
    const TaskId task = kAllTasks[rng.below(kNumTasks)];
    const auto templates = world.conditions(task);
    return templates[rng.below(templates.size())];
}

State random_state(std::size_t d, Rng& rng, double scale) {
    State x(d);
    for (double& v : x) v = scale * rng.normal();
    return x;
}

double rel(double a, double b) {
    const double den = std::max({std::abs(a), std::abs(b), 1e-300});
    return std::abs(a - b) / den;
}

// Groups relabelled as sampled by `p`: the loss is a function of the stored
// states, so differentiating it at fixed states needs this.
std::vector<Group> relabel(std::vector<Group> groups, const ParamVector& p) {
    const auto h = policy_hash(p);
    for (auto& g : groups) {
        g.policy = h;
        for (auto& tr : g.trajectories) tr.policy = h;
    }
    return groups;
}

TeacherEnsemble single_teacher(const ParamVector& teacher) {
    TeacherEnsemble e;
    e.routing = RoutingTable::by_task_name();
    for (TaskId t : kAllTasks) e.experts.emplace(std::string(task_name(t)), teacher);
    e.anchor = teacher;
    return e;
}

TimeGrid short_grid(const ExperimentConfig& config) {
    TimeGrid g = config.grid;
    g.steps = std::min<std::size_t>(g.steps, 5);
    return g;
}

}  // namespace

CheckResult check_kl_chain(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(opt.seed, 0xC1A1));
    const std::size_t d = config.world.dim();
    double worst = 0.0;
    for (std::size_t i = 0; i < opt.kl_instances; ++i) {
        const double t = rng.uniform(0.05, 0.98);
        const double dt = rng.uniform(0.005, std::min(0.1, t - 0.01));
        const double s = sigma(t, config.schedule);
        const auto x = random_state(d, rng, 2.0);
        const auto va = random_state(d, rng, 2.0);
        const auto vb = random_state(d, rng, 2.0);
        const auto ma = transition_mean(x, va, t, dt, s);
        const auto mb = transition_mean(x, vb, t, dt, s);
        const double var = transition_variance(s, dt);
        const Eigen::MatrixXd cov = var * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
        const double k_general = gaussian_kl_general(Eigen::Map<const Eigen::VectorXd>(ma.data(), ma.size()), cov,
                                                     Eigen::Map<const Eigen::VectorXd>(mb.data(), mb.size()), cov);
        const double k_means = kl_means(ma, mb, s, dt);
        const double k_vel = kl_velocities(va, vb, t, s, dt);
        worst = std::max({worst, rel(k_general, k_means), rel(k_means, k_vel), rel(k_general, k_vel)});
    }
    return at_most("kl_chain", worst, 1e-9,
                   std::to_string(opt.kl_instances) + " instances, max relative gap between the three forms", t0);
}

CheckResult check_mc_kl(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(opt.seed, 0x3C));
    const std::size_t d = config.world.dim();
    double worst = 0.0;
    for (std::size_t pair = 0; pair < opt.mc_pairs; ++pair) {
        const double t = rng.uniform(0.05, 0.98);
        const double dt = rng.uniform(0.01, std::min(0.1, t - 0.01));
        const double s = sigma(t, config.schedule);
        const double var = transition_variance(s, dt);
        const double sd = std::sqrt(var);
        // offsets a few standard deviations apart keep the estimate informative
        const auto ma = random_state(d, rng, 1.0);
        auto mb = ma;
        for (double& v : mb) v += sd * rng.uniform(-2.0, 2.0);
        const double exact = kl_means(ma, mb, s, dt);

        Rng srng(derive_seed(opt.seed, 0x3C, pair + 1));
        double sum = 0.0, sumsq = 0.0;
        State x(d);
        for (std::size_t k = 0; k < opt.mc_samples; ++k) {
            for (std::size_t j = 0; j < d; ++j) x[j] = ma[j] + sd * srng.normal();
            const double l = transition_logprob(x, ma, var) - transition_logprob(x, mb, var);
            sum += l;
            sumsq += l * l;
        }
        const double n = static_cast<double>(opt.mc_samples);
        const double mean = sum / n;
        const double se = std::sqrt(std::max(0.0, sumsq / n - mean * mean) / n);
        worst = std::max(worst, std::abs(mean - exact) / std::max(se, 1e-300));
    }
    return at_most("mc_kl", worst, 3.0,
                   std::to_string(opt.mc_pairs) + " pairs x " + std::to_string(opt.mc_samples) +
                       " samples, worst |estimate - closed form| in standard errors",
                   t0);
}

std::vector<CheckResult> check_gradients(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto arch = small_arch(config, opt);
    const auto grid = short_grid(config);
    const double eps = 1e-5, tol = 1e-4;
    const std::size_t n = opt.grad_instances;
    std::vector<CheckResult> out;

    {  // fm_loss
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(opt.seed, 0xF0, i));
            const auto p = random_params(arch, derive_seed(opt.seed, 0xF1, i));
            std::vector<FmExample> batch;
            for (int b = 0; b < 4; ++b) {
                auto c = random_condition(config.world, rng);
                auto x0 = random_state(arch.output_dim, rng, 3.0);
                auto x1 = random_state(arch.output_dim, rng, 1.0);
                batch.push_back({PathSample::make(x0, x1, rng.uniform(0.02, 0.98)), c});
            }
            const auto g = fm_loss(p, batch).grad;
            const auto fd = finite_diff_grad([&](const ParamVector& q) { return fm_loss_value(q, batch); }, p, eps);
            worst = std::max(worst, relative_l2_error(g, fd));
        }
        out.push_back(at_most("grad_fm_loss", worst, tol, std::to_string(n) + " instances, relative L2 vs central differences", t0));
    }
    {  // flow_opd_loss
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(opt.seed, 0xD0, i));
            const auto student = random_params(arch, derive_seed(opt.seed, 0xD1, i));
            const auto ens = single_teacher(random_params(arch, derive_seed(opt.seed, 0xD2, i)));
            std::vector<Group> groups{sample_group(student, random_condition(config.world, rng), 2, grid,
                                                   config.schedule, derive_seed(opt.seed, 0xD3, i))};
            const auto g = flow_opd_loss(student, ens, groups).grad;
            const auto fd = finite_diff_grad(
                [&](const ParamVector& q) { return flow_opd_loss(q, ens, relabel(groups, q)).value; }, student, eps);
            worst = std::max(worst, relative_l2_error(g, fd));
        }
        out.push_back(at_most("grad_flow_opd_loss", worst, tol, std::to_string(n) + " instances, states held fixed", t0));
    }
    {  // mar_loss
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto student = random_params(arch, derive_seed(opt.seed, 0xA0, i));
            const auto anchor = random_params(arch, derive_seed(opt.seed, 0xA1, i));
            const auto probes = full_data_probes(config.world, grid, 6, derive_seed(opt.seed, 0xA2, i));
            const auto g = mar_loss(student, anchor, probes, config.schedule).grad;
            const auto fd = finite_diff_grad(
                [&](const ParamVector& q) { return anchor_discrepancy(q, anchor, probes, config.schedule); }, student, eps);
            worst = std::max(worst, relative_l2_error(g, fd));
        }
        out.push_back(at_most("grad_mar_loss", worst, tol, std::to_string(n) + " instances", t0));
    }
    {  // transition log-prob
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(opt.seed, 0xB0, i));
            const auto p = random_params(arch, derive_seed(opt.seed, 0xB1, i));
            const auto tr = sample_trajectory(p, random_condition(config.world, rng), grid, config.schedule,
                                              derive_seed(opt.seed, 0xB2, i));
            const std::size_t step = rng.below(tr.steps());
            const auto g = replay_logprob(p, tr, step).grad;
            const auto fd =
                finite_diff_grad([&](const ParamVector& q) { return replay_logprob_value(q, tr, step); }, p, eps);
            worst = std::max(worst, relative_l2_error(g, fd));
        }
        out.push_back(at_most("grad_transition_logprob", worst, tol, std::to_string(n) + " instances, random step", t0));
    }
    return out;
}

std::vector<CheckResult> check_score_identity(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto arch = small_arch(config, opt);
    std::vector<CheckResult> out;
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < opt.identity_batches; ++i) {
            Rng rng(derive_seed(opt.seed, 0x15, i));
            const auto student = random_params(arch, derive_seed(opt.seed, 0x16, i));
            const auto ens = single_teacher(random_params(arch, derive_seed(opt.seed, 0x17, i)));
            std::vector<Group> groups;
            for (int j = 0; j < 3; ++j)
                groups.push_back(sample_group(student, random_condition(config.world, rng), 4, config.grid,
                                              config.schedule, derive_seed(derive_seed(opt.seed, 0x18, i), j)));
            const auto opd = flow_opd_loss(student, ens, groups);
            auto direct = pg_opd_gradient(student, ens, groups).direct_term;
            direct *= -1.0;
            worst = std::max(worst, relative_l2_error(direct, opd.grad));
        }
        out.push_back(at_most("kl_gradient_identity", worst, 1e-9,
                              std::to_string(opt.identity_batches) +
                                  " on-policy batches, grad of summed KL vs distillation gradient",
                              t0));
    }
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (std::size_t i = 0; i < opt.nullity_states; ++i) {
            Rng rng(derive_seed(opt.seed, 0x5E, i));
            const auto student = random_params(arch, derive_seed(opt.seed, 0x5F, i));
            const auto ens = single_teacher(random_params(arch, derive_seed(opt.seed, 0x60, i)));
            const double t = rng.uniform(0.1, 0.9);
            const auto x = random_state(arch.output_dim, rng, 1.5);
            const auto r = score_term_nullity(student, ens, x, t, config.grid.dt(), random_condition(config.world, rng),
                                              config.schedule, opt.nullity_samples, derive_seed(opt.seed, 0x61, i));
            const double z = r.mean_norm / (r.std_norm / std::sqrt(static_cast<double>(r.samples)));
            worst = std::max(worst, z);
        }
        out.push_back(at_most("score_term_nullity", worst, 5.0,
                              std::to_string(opt.nullity_states) + " states x " + std::to_string(opt.nullity_samples) +
                                  " actions, ||mean|| in units of std/sqrt(N)",
                              t0));
    }
    return out;
}

std::vector<CheckResult> check_merge_identities(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto arch = config.arch();
    const auto a = random_params(arch, derive_seed(opt.seed, 0x3E1), 0.3);
    const auto b = random_params(arch, derive_seed(opt.seed, 0x3E2), 0.3);
    const auto c = random_params(arch, derive_seed(opt.seed, 0x3E3), 0.3);
    auto mismatches = [](const ParamVector& x, const ParamVector& y) {
        std::size_t k = 0;
        for (std::size_t i = 0; i < x.size(); ++i) k += x[i] != y[i];
        return static_cast<double>(k);
    };
    auto max_abs = [](const ParamVector& x, const ParamVector& y) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
        return m;
    };
    std::vector<CheckResult> out;
    auto t0 = Clock::now();
    out.push_back(at_most("merge_identical", mismatches(merge_models(MergeSpec::uniform({a, a, a, a})), a), 0.0,
                          "uniform merge of four copies, differing coordinates", t0));
    t0 = Clock::now();
    out.push_back(at_most("merge_one_hot", mismatches(merge_models({{a, b}, {1.0, 0.0}}), a), 0.0,
                          "weights [1, 0], differing coordinates", t0));

    t0 = Clock::now();
    const std::vector<double> w1{0.5, 0.3, 0.2}, w2{0.1, 0.1, 0.8};
    const double alpha = 0.35;
    std::vector<double> wm(3);
    for (int i = 0; i < 3; ++i) wm[i] = alpha * w1[i] + (1 - alpha) * w2[i];
    const auto m1 = merge_models({{a, b, c}, w1});
    const auto m2 = merge_models({{a, b, c}, w2});
    auto combo = m1;
    for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = alpha * m1[i] + (1 - alpha) * m2[i];
    out.push_back(at_most("merge_affine", max_abs(merge_models({{a, b, c}, wm}), combo), 1e-12,
                          "max |merge(mixed weights) - mix of merges|", t0));

    t0 = Clock::now();
    out.push_back(at_most("merge_permutation",
                          max_abs(merge_models({{a, b, c}, {0.2, 0.5, 0.3}}), merge_models({{c, a, b}, {0.3, 0.2, 0.5}})),
                          1e-12, "max |difference| after a joint permutation", t0));
    return out;
}

CheckResult check_stop_gradient(const ExperimentConfig& config, const VerifyOptions& opt) {
    const auto t0 = Clock::now();
    const auto arch = small_arch(config, opt);
    const auto grid = short_grid(config);
    Rng rng(derive_seed(opt.seed, 0x565));
    const auto student = random_params(arch, derive_seed(opt.seed, 0x566));
    auto teacher = student;
    Rng pr(derive_seed(opt.seed, 0x567));
    for (auto& v : teacher.values()) v += 0.3 * pr.normal();
    const auto ens = single_teacher(teacher);
    std::vector<Group> groups{sample_group(student, random_condition(config.world, rng), 3, grid, config.schedule,
                                           derive_seed(opt.seed, 0x568))};
    const auto g = flow_opd_loss(student, ens, groups).grad;

    // teacher frozen: matches; teacher moving with the student: must not
    const auto frozen = finite_diff_grad(
        [&](const ParamVector& q) { return flow_opd_loss(q, ens, relabel(groups, q)).value; }, student, 1e-5);
    const auto tied = finite_diff_grad(
        [&](const ParamVector& q) {
            auto t = q;
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += teacher[i] - student[i];
            return flow_opd_loss(q, single_teacher(t), relabel(groups, q)).value;
        },
        student, 1e-5);
    const double e_frozen = relative_l2_error(g, frozen);
    const double e_tied = relative_l2_error(g, tied);
    auto r = at_most("stop_gradient", e_frozen, 1e-4,
                     "vs frozen-teacher differences; tied-teacher gap " + std::to_string(e_tied) + " (must be > 1e-2)", t0);
    r.passed = r.passed && e_tied > 1e-2;
    return r;
}

VerifyReport run_verification(const ExperimentConfig& config, const VerifyOptions& opt) {
    std::optional<testing::ScopedWeightFault> fault;
    if (opt.weight_fault != 0.0) fault.emplace(opt.weight_fault);
    VerifyReport rep;
    auto add = [&](std::vector<CheckResult> v) {
        for (auto& c : v) rep.checks.push_back(std::move(c));
    };
    rep.checks.push_back(check_kl_chain(config, opt));
    rep.checks.push_back(check_mc_kl(config, opt));
    add(check_gradients(config, opt));
    add(check_score_identity(config, opt));
    add(check_merge_identities(config, opt));
    rep.checks.push_back(check_stop_gradient(config, opt));
    return rep;
}

}  // namespace flowopd
