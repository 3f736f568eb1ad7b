#include <doctest.h>

#include <cmath>
#include <numeric>

#include "flowopd/rewards.hpp"

using namespace flowopd;

TEST_CASE("region reward") {
    const auto w = default_world();
    const auto c = Condition::region(0, 4);
    CHECK(reward_region(w.mixture[0].mean, c, w) == 1.0);
    CHECK(reward_region(State{4.0, 3.0}, c, w) == doctest::Approx(std::exp(-0.5)));
    CHECK(reward_region(State{4.0, 3.0}, c, w) == doctest::Approx(0.6065).epsilon(1e-4));
    // wrong component's mean, six units away
    const double off = reward_region(w.mixture[1].mean, c, w);
    CHECK(off <= std::exp(-18.0) * (1 + 1e-12));
    CHECK(off == doctest::Approx(1.523e-8).epsilon(1e-3));
    CHECK_THROWS_AS(reward_region(State{0, 0}, Condition::ring(1.0), w), std::invalid_argument);
}

TEST_CASE("ring reward") {
    auto w = default_world();
    w.ring_tau = 0.5;
    const auto c = Condition::ring(2.0);
    CHECK(reward_ring(State{2.0, 0.0}, c, w) == 1.0);
    CHECK(reward_ring(State{0.0, 0.0}, c, w) == doctest::Approx(std::exp(-8.0)));
    CHECK(reward_ring(State{0.0, 0.0}, c, w) == doctest::Approx(3.35e-4).epsilon(1e-3));
    const State x{1.3, -0.4};
    for (double th : {0.3, 1.7, 4.0}) {
        const State r{std::cos(th) * x[0] - std::sin(th) * x[1], std::sin(th) * x[0] + std::cos(th) * x[1]};
        CHECK(reward_ring(r, c, w) == doctest::Approx(reward_ring(x, c, w)).epsilon(1e-12));
    }
    CHECK_THROWS(reward_ring(x, Condition::region(0, 4), w));
}

TEST_CASE("preference reward") {
    const auto w = default_world();
    CHECK(reward_preference(w.preference_center, w) == 1.0);
    double prev = 2.0;
    for (double d = 0.0; d < 4.0; d += 0.25) {
        const double r = reward_preference(State{w.preference_center[0] + d, w.preference_center[1]}, w);
        CHECK(r < prev);
        prev = r;
    }
    const double two = 2.0 * w.preference_scale;
    CHECK(reward_preference(State{w.preference_center[0], w.preference_center[1] - two}, w) ==
          doctest::Approx(0.1353).epsilon(1e-3));
}

TEST_CASE("quality reward") {
    const auto w = default_world();
    CHECK(reward_quality(w.mixture[0].mean, w) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(reward_quality(State{30.0, 30.0}, w) < 1e-10);
    CHECK(reward_quality(State{13.0, 3.0}, w) < 1e-10);  // 10 sigma from the nearest mode
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const double q = reward_quality(State{6 * rng.normal(), 6 * rng.normal()}, w);
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
    }

    // unequal weights: the heaviest mode scores 1, another its relative weight
    TaskWorld u = w;
    u.mixture[0].weight = 0.4;
    u.mixture[1].weight = 0.2;
    u.mixture[0].mean = {20.0, 20.0};
    u.mixture[1].mean = {-20.0, 20.0};
    u.mixture[2].mean = {20.0, -20.0};
    u.mixture[3].mean = {-20.0, -20.0};
    CHECK(reward_quality(u.mixture[0].mean, u) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(reward_quality(u.mixture[1].mean, u) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("mixture density integrates to one") {
    const auto w = default_world();
    double s = 0.0;
    const double h = 0.05;
    for (double x = -10; x < 10; x += h)
        for (double y = -10; y < 10; y += h) s += mixture_density(State{x + h / 2, y + h / 2}, w) * h * h;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("group advantage") {
    CHECK(group_advantage(std::vector<double>{0.3, 0.3, 0.3}) == std::vector<double>{0, 0, 0});
    const auto a = group_advantage(std::vector<double>{0.0, 1.0});
    CHECK(a[0] == doctest::Approx(-1.0));
    CHECK(a[1] == doctest::Approx(1.0));
    CHECK_THROWS(group_advantage(std::vector<double>{1.0}));

    const std::vector<double> r{0.1, 0.7, 0.35, 0.9, 0.05};
    const auto base = group_advantage(r);
    CHECK(std::abs(std::accumulate(base.begin(), base.end(), 0.0)) <= 1e-12);
    auto shifted = r, scaled = r;
    for (auto& v : shifted) v += 3.0;
    for (auto& v : scaled) v *= 7.5;
    const auto as = group_advantage(shifted), ak = group_advantage(scaled);
    for (std::size_t i = 0; i < r.size(); ++i) {
        CHECK(as[i] == doctest::Approx(base[i]).epsilon(1e-12));
        CHECK(ak[i] == doctest::Approx(base[i]).epsilon(1e-12));
    }
    // tiny spread goes through the floor
    const auto fl = group_advantage(std::vector<double>{0.0, 2e-7});
    CHECK(fl[1] == doctest::Approx(1e-7 / kAdvantageStdFloor));
}

TEST_CASE("mix_reward") {
    using M = std::map<TaskId, double>;
    CHECK(mix_reward(M{{TaskId::Ring, 0.37}}, RewardWeights{{TaskId::Ring, 1.0}}) == 0.37);
    CHECK(mix_reward(M{{TaskId::Region, 1.0}, {TaskId::Ring, 0.0}},
                     RewardWeights{{TaskId::Region, 3.0}, {TaskId::Ring, 1.0}}) == doctest::Approx(0.75));
    M a, b;
    a[TaskId::Quality] = 0.2;
    a[TaskId::Region] = 0.9;
    b[TaskId::Region] = 0.9;
    b[TaskId::Quality] = 0.2;
    const RewardWeights w{{TaskId::Quality, 1.0}, {TaskId::Region, 2.0}};
    CHECK(mix_reward(a, w) == mix_reward(b, w));
    CHECK_THROWS(mix_reward(M{}, w));
    CHECK_THROWS(mix_reward(M{{TaskId::Ring, 1.0}}, RewardWeights{{TaskId::Ring, 0.0}}));
    CHECK_THROWS(mix_reward(M{{TaskId::Ring, 1.0}}, RewardWeights{{TaskId::Ring, -1.0}}));
}

TEST_CASE("blended reward respects applicability") {
    const auto w = default_world();
    const RewardWeights all{{TaskId::Region, 3}, {TaskId::Ring, 1}, {TaskId::Preference, 1}};
    const State x{3.0, 3.0};
    const auto rc = Condition::region(0, 4);
    CHECK(blended_reward(x, rc, w, all) ==
          doctest::Approx((3 * reward_region(x, rc, w) + reward_preference(x, w)) / 4.0));
    CHECK_THROWS(blended_reward(x, rc, w, RewardWeights{{TaskId::Ring, 1.0}}));
    CHECK(reward_applicable(TaskId::Quality, rc));
    CHECK_FALSE(reward_applicable(TaskId::Ring, rc));
    CHECK(task_reward(TaskId::Preference, x, rc, w) == reward_preference(x, w));
}

TEST_CASE("preference conflicts with a region task by construction") {
    const auto w = default_world();
    // coarse grid search for the preference argmax, then check every region reward there
    State best{0, 0};
    double top = -1;
    for (double a = -8; a <= 8; a += 0.05)
        for (double b = -8; b <= 8; b += 0.05) {
            const double r = reward_preference(State{a, b}, w);
            if (r > top) top = r, best = {a, b};
        }
    double worst = 1.0;
    for (const auto& c : w.conditions(TaskId::Region)) worst = std::min(worst, reward_region(best, c, w));
    CHECK(worst < 0.1);
    // and it pulls off the NE mode itself
    CHECK(reward_region(best, Condition::region(0, 4), w) < 0.5);
}

TEST_CASE("world validation and templates") {
    auto w = default_world();
    CHECK_NOTHROW(w.validate());
    CHECK(w.conditions(TaskId::Region).size() == 4);
    CHECK(w.conditions(TaskId::Ring).size() == 1);
    w.mixture[0].weight = 0.5;
    CHECK_THROWS(w.validate());

    Rng rng(12);
    double m0 = 0, m1 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const auto x = sample_component(default_world(), 1, rng);
        m0 += x[0];
        m1 += x[1];
    }
    CHECK(m0 / n == doctest::Approx(3.0).epsilon(0.02));
    CHECK(m1 / n == doctest::Approx(-3.0).epsilon(0.02));
}
