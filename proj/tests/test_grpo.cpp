#include <doctest.h>

#include <cmath>
#include <limits>

#include "flowopd/grpo.hpp"
#include "helpers.hpp"

using namespace flowopd;

namespace {

TrainContext small_ctx() {
    TrainContext ctx{default_world(), TimeGrid{}, NoiseSchedule{}, EvalConfig{}};
    ctx.eval.samples_per_task = 128;
    ctx.eval.grid = TimeGrid{10, 0.02, 0.98};
    return ctx;
}

GradVector trajectory_score(const ParamVector& p, const Trajectory& tr) {
    GradVector g(p.size());
    for (std::size_t k = 0; k < tr.steps(); ++k) g += replay_logprob(p, tr, k).grad;
    return g;
}

GrpoConfig quick_grpo(std::size_t iterations) {
    GrpoConfig c;
    c.iterations = iterations;
    c.group_size = 8;
    c.conditions_per_iter = 4;
    c.learning_rate = 3e-3;
    c.optimizer = OptimizerKind::Adam;
    c.eval_every = 0;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("zero advantages give an exactly zero gradient") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {6}), 3, 0.4);
    std::vector<Group> groups;
    for (std::size_t j = 0; j < 3; ++j) {
        auto g = sample_group(p, Condition::region(j, 4), 5, ctx.grid, ctx.schedule, 40 + j);
        g.rewards.assign(g.size(), 0.25 * static_cast<double>(j));
        groups.push_back(std::move(g));
    }
    const auto grad = grpo_gradient(p, groups);
    for (double v : grad.values) CHECK(v == 0.0);
}

TEST_CASE("two-sample group: half the score difference") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {6}), 4, 0.4);
    auto g = sample_group(p, Condition::ring(3.0), 2, ctx.grid, ctx.schedule, 8);
    g.rewards = {0.0, 1.0};
    const std::vector<Group> groups{g};
    const auto grad = grpo_gradient(p, groups);
    auto expect = trajectory_score(p, g.trajectories[1]);
    expect.axpy(-1.0, trajectory_score(p, g.trajectories[0]));
    expect *= 0.5;
    CHECK(relative_l2_error(grad, expect) < 1e-12);

    // ratio is 1 on-policy, so clipping changes nothing
    CHECK(relative_l2_error(grpo_gradient(p, groups, 0.2), grad) < 1e-12);
}

TEST_CASE("on-policy and scoring preconditions") {
    const auto ctx = small_ctx();
    const auto arch = testutil::arch_for(ctx.world, {6});
    const auto p = testutil::gaussian_params(arch, 1);
    auto q = p;
    q[0] += 1e-9;
    auto g = sample_group(p, Condition::region(0, 4), 4, ctx.grid, ctx.schedule, 2);
    std::vector<Group> unscored{g};
    CHECK_THROWS_AS(grpo_gradient(p, unscored), std::invalid_argument);
    score_group(g, ctx.world, {{TaskId::Region, 1.0}});
    std::vector<Group> groups{g};
    CHECK_NOTHROW(grpo_gradient(p, groups));
    CHECK_THROWS_AS(grpo_gradient(q, groups), OffPolicyError);
}

TEST_CASE("score_group uses the blended reward of final samples") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {6}), 2);
    const auto c = Condition::region(3, 4);
    auto g = sample_group(p, c, 4, ctx.grid, ctx.schedule, 6);
    const RewardWeights w{{TaskId::Region, 1.0}, {TaskId::Quality, 1.0}};
    score_group(g, ctx.world, w);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK(g.rewards[i] == blended_reward(g.trajectories[i].final_sample(), c, ctx.world, w));
}

TEST_CASE("one ascent step raises the region reward") {
    const auto ctx = small_ctx();
    const auto base = testutil::quick_pretrained();
    const auto conds = ctx.world.conditions(TaskId::Region);
    auto mean_reward = [&](const ParamVector& p, std::uint64_t seed) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < conds.size(); ++j) {
            auto g = sample_group(p, conds[j], 64, ctx.grid, ctx.schedule, derive_seed(seed, j), 4);
            score_group(g, ctx.world, {{TaskId::Region, 1.0}});
            for (double r : g.rewards) s += r, ++n;
        }
        return s / static_cast<double>(n);
    };
    int up = 0;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        std::vector<Group> groups;
        for (std::size_t j = 0; j < 8; ++j) {
            auto g = sample_group(base, conds[j % conds.size()], 24, ctx.grid, ctx.schedule, derive_seed(700 + trial, j), 4);
            score_group(g, ctx.world, {{TaskId::Region, 1.0}});
            groups.push_back(std::move(g));
        }
        const auto grad = grpo_gradient(base, groups);
        auto stepped = base;
        const double lr = 0.02 / grad.norm();
        for (std::size_t i = 0; i < stepped.size(); ++i) stepped[i] += lr * grad[i];
        // common noise before and after the step
        const std::uint64_t eval_seed = 9000 + trial;
        up += mean_reward(stepped, eval_seed) > mean_reward(base, eval_seed);
    }
    CHECK(up >= 8);
}

TEST_CASE("zero iterations return the init") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {6}), 7);
    CHECK(train_teacher(p, TaskId::Ring, quick_grpo(0), ctx) == p);
    CHECK(train_mix(p, quick_grpo(0), MixMode::ScalarMix, {{TaskId::Ring, 1.0}}, ctx) == p);
}

TEST_CASE("single-task mix reduces to the teacher run") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {8}), 9, 0.3);
    const auto cfg = quick_grpo(4);
    const auto teacher = train_teacher(p, TaskId::Region, cfg, ctx);
    const RewardWeights only{{TaskId::Region, 3.0}, {TaskId::Ring, 0.0}};
    CHECK(train_mix(p, cfg, MixMode::ScalarMix, only, ctx) == teacher);
    CHECK(train_mix(p, cfg, MixMode::EpochInterleaved, only, ctx) == teacher);

    const RewardWeights both{{TaskId::Region, 3.0}, {TaskId::Ring, 1.0}};
    CHECK_FALSE(train_mix(p, cfg, MixMode::ScalarMix, both, ctx) ==
                train_mix(p, cfg, MixMode::EpochInterleaved, both, ctx));
    CHECK_THROWS(train_mix(p, cfg, MixMode::ScalarMix, {{TaskId::Ring, 0.0}}, ctx));
    CHECK_THROWS(train_mix(p, cfg, MixMode::ScalarMix, {{TaskId::Ring, -1.0}}, ctx));
}

TEST_CASE("threaded training matches serial bit for bit") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {8}), 10, 0.3);
    auto cfg = quick_grpo(3);
    const auto serial = train_teacher(p, TaskId::Quality, cfg, ctx);
    cfg.threads = 4;
    CHECK(train_teacher(p, TaskId::Quality, cfg, ctx) == serial);
}

TEST_CASE("callback rows and training progress") {
    const auto ctx = small_ctx();
    const auto p = testutil::quick_pretrained(800, {24, 24});
    auto cfg = quick_grpo(40);
    cfg.eval_every = 20;
    std::vector<GrpoIterationStats> rows;
    const auto out = train_teacher(p, TaskId::Region, cfg, ctx, [&](const GrpoIterationStats& s) { rows.push_back(s); });
    REQUIRE(rows.size() == 40);
    CHECK(rows[19].eval.has_value());
    CHECK_FALSE(rows[20].eval.has_value());
    CHECK(rows.back().eval.has_value());
    CHECK(std::isnan(rows[0].train_reward[static_cast<std::size_t>(TaskId::Ring)]));
    CHECK(evaluate_task(out, TaskId::Region, ctx.world, ctx.schedule, ctx.eval) >
          evaluate_task(p, TaskId::Region, ctx.world, ctx.schedule, ctx.eval));
}

TEST_CASE("invalid configs are rejected") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {4}), 1);
    auto cfg = quick_grpo(1);
    cfg.group_size = 1;
    CHECK_THROWS(train_teacher(p, TaskId::Ring, cfg, ctx));
    cfg = quick_grpo(1);
    cfg.learning_rate = 0.0;
    CHECK_THROWS(train_teacher(p, TaskId::Ring, cfg, ctx));
}

TEST_CASE("divergence surfaces as an error") {
    const auto ctx = small_ctx();
    auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {4}), 1);
    p[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(train_teacher(p, TaskId::Region, quick_grpo(3), ctx), DivergenceError);
}

TEST_CASE("interference: identical tasks") {
    const auto ctx = small_ctx();
    const auto p = testutil::gaussian_params(testutil::arch_for(ctx.world, {6}), 11, 0.4);
    const auto r = gradient_interference(p, TaskId::Region, TaskId::Region, 4, 8, ctx, 3);
    REQUIRE(r.cosine.has_value());
    CHECK(*r.cosine == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.inner_product == doctest::Approx(r.norm_a * r.norm_a));

    const auto ab = gradient_interference(p, TaskId::Region, TaskId::Preference, 4, 8, ctx, 3);
    const auto ba = gradient_interference(p, TaskId::Preference, TaskId::Region, 4, 8, ctx, 3);
    CHECK(ab.inner_product == doctest::Approx(ba.inner_product));

    const auto none = interference_from_gradients(GradVector(3), GradVector(std::vector<double>{1, 0, 0}));
    CHECK_FALSE(none.cosine.has_value());
}

TEST_CASE("interference: rewards on disjoint coordinates of a linear field") {
    // no hidden layer: coordinate i of the velocity only sees output row i, and
    // the per-coordinate noises are independent
    const auto world = default_world();
    const ArchSpec lin{model_input_dim(world.dim(), world.components()), {}, 2, Activation::Tanh};
    const auto p = testutil::gaussian_params(lin, 12, 0.2);
    std::vector<Condition> conds(300, Condition::ring(2.0));
    const auto r = gradient_interference(
        p, conds, [](const Trajectory& t) { return t.final_sample()[0]; },
        [](const Trajectory& t) { return t.final_sample()[1]; }, 16, TimeGrid{}, NoiseSchedule{}, 5);
    REQUIRE(r.cosine.has_value());
    CHECK(std::abs(*r.cosine) < 0.15);

    // while the same reward twice is perfectly aligned
    const auto s = gradient_interference(
        p, conds, [](const Trajectory& t) { return t.final_sample()[0]; },
        [](const Trajectory& t) { return t.final_sample()[0]; }, 16, TimeGrid{}, NoiseSchedule{}, 5);
    CHECK(*s.cosine == doctest::Approx(1.0));
}

TEST_CASE("mix mode names") {
    CHECK(parse_mix_mode(mix_mode_name(MixMode::ScalarMix)) == MixMode::ScalarMix);
    CHECK(parse_mix_mode(mix_mode_name(MixMode::EpochInterleaved)) == MixMode::EpochInterleaved);
    CHECK_THROWS(parse_mix_mode("average"));
}
