#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "flowopd/flow_core.hpp"
#include "flowopd/random.hpp"
#include "helpers.hpp"

using namespace flowopd;

namespace {

constexpr double kPi = std::numbers::pi;

State vec(std::initializer_list<double> l) { return State(l); }

}  // namespace

TEST_CASE("ot_interpolate") {
    const auto x0 = vec({0.0, 0.0}), x1 = vec({2.0, 4.0});
    CHECK(ot_interpolate(x0, x1, 0.0) == x0);
    CHECK(ot_interpolate(x0, x1, 1.0) == x1);
    const auto m = ot_interpolate(x0, x1, 0.25);
    CHECK(m[0] == doctest::Approx(0.5));
    CHECK(m[1] == doctest::Approx(1.0));
    CHECK_THROWS(ot_interpolate(x0, vec({1.0}), 0.5));
    CHECK_THROWS(ot_interpolate(x0, x1, 1.5));

    const auto p = PathSample::make(vec({1.0, -1.0}), vec({3.0, 5.0}), 0.3);
    CHECK(p.target_v == vec({2.0, 6.0}));
    CHECK(p.x_t[0] == doctest::Approx(0.7 * 1.0 + 0.3 * 3.0));
}

TEST_CASE("fm_loss values") {
    const auto world = default_world();
    const auto arch = testutil::arch_for(world, {6});
    const ParamVector zero(arch);
    const Condition c = Condition::region(0, world.components());
    // zero model, every target of squared norm 5
    std::vector<FmExample> batch{{PathSample::make(vec({0, 0}), vec({1, 2}), 0.3), c},
                                 {PathSample::make(vec({1, 1}), vec({3, 0}), 0.8), c}};
    CHECK(fm_loss_value(zero, batch) == doctest::Approx(5.0));

    // a model whose output bias equals the (shared) target gives zero loss
    ParamVector exact(arch);
    exact[exact.size() - 2] = 1.0;
    exact[exact.size() - 1] = 2.0;
    std::vector<FmExample> same{{PathSample::make(vec({0, 0}), vec({1, 2}), 0.3), c},
                                {PathSample::make(vec({5, 5}), vec({6, 7}), 0.6), c}};
    CHECK(fm_loss_value(exact, same) == 0.0);

    // hand-rolled mean of squared norms
    Rng rng(8);
    const auto p = testutil::gaussian_params(arch, 4);
    std::vector<FmExample> rb;
    for (int i = 0; i < 6; ++i) {
        State a{rng.normal() * 3, rng.normal() * 3}, b{rng.normal(), rng.normal()};
        rb.push_back({PathSample::make(a, b, rng.uniform(0.02, 0.98)), Condition::ring(3.0)});
    }
    double ref = 0.0;
    for (const auto& e : rb) {
        const auto v = velocity(p, e.path.x_t, e.path.t, e.condition);
        ref += squared_distance(v, e.path.target_v);
    }
    ref /= static_cast<double>(rb.size());
    const auto lg = fm_loss(p, rb);
    CHECK(std::abs(lg.value - ref) <= 1e-12);
    CHECK(relative_l2_error(lg.grad, finite_diff_grad([&](const ParamVector& q) { return fm_loss_value(q, rb); }, p,
                                                       1e-5)) < 1e-4);
    CHECK_THROWS(fm_loss(p, std::vector<FmExample>{}));
}

TEST_CASE("sigma schedule") {
    const NoiseSchedule s{0.7};
    CHECK(sigma(0.5, s) == doctest::Approx(0.7));
    CHECK(sigma(0.2, s) == doctest::Approx(0.35));
    CHECK(sigma(0.37, NoiseSchedule{1.4}) == 2.0 * sigma(0.37, s));
    CHECK_THROWS(sigma(0.0, s));
    CHECK_THROWS(sigma(1.0, s));
}

TEST_CASE("sde_drift") {
    const auto v = vec({0.3, -0.2}), x = vec({1.0, 2.0});
    CHECK(sde_drift(v, x, 0.4, 0.0) == v);
    const auto d = sde_drift(vec({0, 0}), vec({2, 0}), 0.5, 0.7);
    CHECK(d[0] == doctest::Approx(0.98));
    CHECK(d[1] == doctest::Approx(0.0));
    const double alpha = 2.5;
    const auto d0 = sde_drift(vec({0, 0}), x, 0.3, 0.6);
    const auto d1 = sde_drift(v, x, 0.3, 0.6);
    const auto da = sde_drift(vec({alpha * 0.3, alpha * -0.2}), x, 0.3, 0.6);
    for (int i = 0; i < 2; ++i) CHECK(da[i] - d0[i] == doctest::Approx(alpha * (d1[i] - d0[i])));
    CHECK_THROWS(sde_drift(v, x, 0.0, 0.7));
}

TEST_CASE("transition mean and Euler-Maruyama step") {
    // descending step: x_{t-dt} = x_t - drift dt; drift = v + 0.49 (x + 0.5 v)
    const auto mu = transition_mean(vec({1, 1}), vec({0.5, -0.5}), 0.5, 0.1, 0.7);
    CHECK(mu[0] == doctest::Approx(0.88875).epsilon(1e-12));
    CHECK(mu[1] == doctest::Approx(1.01325).epsilon(1e-12));

    const auto x = vec({0.4, -1.2});
    CHECK(em_step(x, vec({0, 0}), 0.6, 0.05, 0.0, vec({0.3, 0.3})) == x);
    CHECK(em_step(x, vec({0.2, 0.1}), 0.6, 0.05, 0.7, vec({0, 0})) ==
          transition_mean(x, vec({0.2, 0.1}), 0.6, 0.05, 0.7));

    Rng rng(1);
    for (int k = 0; k < 50; ++k) {
        const double t = rng.uniform(0.1, 0.9), dt = 0.02, s = rng.uniform(0.2, 1.5);
        const State xt{rng.normal(), rng.normal()}, v{rng.normal(), rng.normal()}, n{rng.normal(), rng.normal()};
        const auto out = em_step(xt, v, t, dt, s, n);
        const double c = s * s / (2 * t);
        for (int i = 0; i < 2; ++i) {
            const double m = xt[i] - (v[i] + c * (xt[i] + (1 - t) * v[i])) * dt;
            CHECK(std::abs(out[i] - (m + s * std::sqrt(dt) * n[i])) <= 1e-12);
        }
    }

    // param overload agrees with the state overload
    const auto world = default_world();
    const auto p = testutil::gaussian_params(testutil::arch_for(world, {5}), 2);
    const Condition c = Condition::ring(2.0);
    const NoiseSchedule sch;
    const auto v = velocity(p, x, 0.6, c);
    CHECK(transition_mean(p, x, 0.6, 0.05, sch, c) == transition_mean(x, v, 0.6, 0.05, sigma(0.6, sch)));
}

TEST_CASE("velocity gain is d mean / d v") {
    const double t = 0.3, s = 0.55, dt = 0.04;
    const auto x = vec({0.2, 0.7});
    const auto a = transition_mean(x, vec({0.0, 0.0}), t, dt, s);
    const auto b = transition_mean(x, vec({1.0, 0.0}), t, dt, s);
    CHECK((b[0] - a[0]) == doctest::Approx(-dt * velocity_gain(t, s)));
    CHECK(velocity_gain(t, s) == doctest::Approx(1 + s * s * (1 - t) / (2 * t)));
}

TEST_CASE("transition log-density") {
    const auto mu = vec({0.3, -0.1});
    CHECK(transition_logprob(mu, mu, 0.049) == doctest::Approx(-std::log(2 * kPi * 0.049)).epsilon(1e-14));
    CHECK(transition_logprob(mu, mu, 0.049) == doctest::Approx(1.178058).epsilon(1e-6));
    CHECK(transition_logprob(vec({1.3, 0.9}), vec({1.0, 1.0}), 0.2) ==
          doctest::Approx(transition_logprob(vec({0.3, -0.1}), vec({0.0, 0.0}), 0.2)));
    const double var = 0.3;
    CHECK(transition_logprob(vec({std::sqrt(var)}), vec({0.0}), var) ==
          doctest::Approx(-0.5 * std::log(2 * kPi * var) - 0.5));
    CHECK_THROWS(transition_logprob(mu, mu, 0.0));
    CHECK(transition_variance(1e-6, 1e-6) == kVarianceFloor);
    CHECK(transition_variance(0.7, 0.1) == doctest::Approx(0.049));
}

TEST_CASE("general Gaussian KL") {
    using Eigen::MatrixXd;
    using Eigen::VectorXd;
    const VectorXd z = VectorXd::Zero(2);
    const MatrixXd I = MatrixXd::Identity(2, 2);
    CHECK(gaussian_kl_general(z, I, z, I) == doctest::Approx(0.0));
    CHECK(gaussian_kl_general(z, I, VectorXd::Unit(2, 0), I) == doctest::Approx(0.5));
    CHECK(gaussian_kl_general(z, I, z, 2 * I) == doctest::Approx(0.193147).epsilon(1e-6));
    CHECK(gaussian_kl_general(z, I, z, 2 * I) == doctest::Approx(0.5 * (1 - 2 + std::log(4.0))));
    MatrixXd bad = I;
    bad(1, 1) = -1;
    CHECK_THROWS_AS(gaussian_kl_general(z, bad, z, I), std::invalid_argument);

    // non-isotropic case against a hand expansion
    MatrixXd s1(2, 2), s2(2, 2);
    s1 << 2.0, 0.3, 0.3, 1.0;
    s2 << 1.0, -0.2, -0.2, 0.5;
    VectorXd m1(2), m2(2);
    m1 << 0.1, 0.2;
    m2 << -0.4, 0.9;
    const MatrixXd inv = s2.inverse();
    const VectorXd d = m2 - m1;
    const double ref = 0.5 * ((inv * s1).trace() - 2 + d.dot(inv * d) + std::log(s2.determinant() / s1.determinant()));
    CHECK(gaussian_kl_general(m1, s1, m2, s2) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("KL in mean and velocity form") {
    CHECK(kl_means(vec({1, 1}), vec({1, 1}), 0.7, 0.1) == 0.0);
    CHECK(kl_means(vec({0.3, 0.4}), vec({0, 0}), 0.7, 0.1) == doctest::Approx(2.551020).epsilon(1e-6));
    CHECK(weight_w(0.5, 0.7, 0.1) == doctest::Approx(0.158166).epsilon(1e-6));
    CHECK(weight_w(0.5, 0.7, 0.05) == doctest::Approx(0.5 * weight_w(0.5, 0.7, 0.1)).epsilon(1e-15));
    CHECK(kl_velocities(vec({1, 0}), vec({0, 0}), 0.5, 0.7, 0.1) == doctest::Approx(0.158166).epsilon(1e-6));
    CHECK(kl_velocities(vec({0, 2}), vec({0, 0}), 0.5, 0.7, 0.1) == doctest::Approx(0.632663).epsilon(1e-6));
    CHECK(kl_velocities(vec({0.2, 0.1}), vec({0.2, 0.1}), 0.5, 0.7, 0.1) == 0.0);

}

TEST_CASE("KL chain over 1000 random instances") {
    Rng rng(2024);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        const double t = rng.uniform(0.05, 0.98), dt = rng.uniform(0.005, std::min(0.1, t - 0.01));
        const double s = sigma(t, NoiseSchedule{rng.uniform(0.2, 1.5)});
        const State x{2 * rng.normal(), 2 * rng.normal()};
        const State va{2 * rng.normal(), 2 * rng.normal()}, vb{2 * rng.normal(), 2 * rng.normal()};
        const auto ma = transition_mean(x, va, t, dt, s), mb = transition_mean(x, vb, t, dt, s);
        const Eigen::MatrixXd cov = transition_variance(s, dt) * Eigen::MatrixXd::Identity(2, 2);
        const double g = gaussian_kl_general(Eigen::Map<const Eigen::VectorXd>(ma.data(), 2), cov,
                                             Eigen::Map<const Eigen::VectorXd>(mb.data(), 2), cov);
        const double m = kl_means(ma, mb, s, dt), v = kl_velocities(va, vb, t, s, dt);
        CHECK(g >= 0.0);
        worst = std::max({worst, std::abs(g - m) / m, std::abs(v - m) / m});
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("Monte-Carlo reverse KL") {
    Rng rng(31);
    for (int pair = 0; pair < 5; ++pair) {
        const double s = 0.6, dt = 0.05, var = transition_variance(s, dt), sd = std::sqrt(var);
        const State a{rng.normal(), rng.normal()};
        const State b{a[0] + sd * rng.uniform(-2, 2), a[1] + sd * rng.uniform(-2, 2)};
        const std::size_t n = 200000;
        double sum = 0, sumsq = 0;
        State x(2);
        for (std::size_t k = 0; k < n; ++k) {
            x[0] = a[0] + sd * rng.normal();
            x[1] = a[1] + sd * rng.normal();
            const double l = transition_logprob(x, a, var) - transition_logprob(x, b, var);
            sum += l;
            sumsq += l * l;
        }
        const double mean = sum / n, se = std::sqrt((sumsq / n - mean * mean) / n);
        CHECK(std::abs(mean - kl_means(a, b, s, dt)) <= 3.5 * se);
    }
}

TEST_CASE("weight fault hook") {
    const double base = weight_w(0.4, 0.5, 0.1);
    {
        testing::ScopedWeightFault f(0.01);
        CHECK(weight_w(0.4, 0.5, 0.1) == doctest::Approx(1.01 * base));
    }
    CHECK(weight_w(0.4, 0.5, 0.1) == base);
}

TEST_CASE("time grid") {
    const TimeGrid g{10, 0.02, 0.98};
    CHECK(g.dt() == doctest::Approx(0.096));
    const auto ts = g.times();
    REQUIRE(ts.size() == 11);
    CHECK(ts.front() == 0.98);
    CHECK(ts.back() == doctest::Approx(0.02));
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) CHECK(ts[i] > ts[i + 1]);
    CHECK_THROWS(TimeGrid{0, 0.02, 0.98}.validate());
    CHECK_THROWS(TimeGrid{10, 0.0, 0.98}.validate());
    CHECK_THROWS(TimeGrid{10, 0.5, 0.4}.validate());
    CHECK_THROWS(TimeGrid{10, 0.02, 1.0}.validate());
}
