#include "flowopd/fm_training.hpp"

#include <cmath>
#include <string>

#include "flowopd/error.hpp"

namespace flowopd {

std::vector<FmExample> make_fm_batch(const FmDataSource& source, std::size_t n, double t_min,
                                     double t_max, Rng& rng) {
    std::vector<FmExample> batch;
    batch.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        FmDatum d = source(rng);
        State noise(d.x.size());
        rng.fill_normal(noise);
        const double t = rng.uniform(t_min, t_max);
        batch.push_back({PathSample::make(std::move(d.x), std::move(noise), t), std::move(d.condition)});
    }
    return batch;
}

std::vector<FmExample> make_fm_batch(std::span<const FmDatum> data, double t_min, double t_max,
                                     Rng& rng) {
    std::vector<FmExample> batch;
    batch.reserve(data.size());
    for (const auto& d : data) {
        State noise(d.x.size());
        rng.fill_normal(noise);
        const double t = rng.uniform(t_min, t_max);
        batch.push_back({PathSample::make(d.x, std::move(noise), t), d.condition});
    }
    return batch;
}

ParamVector fit_flow_matching(ParamVector params, const FmDataSource& source,
                              const FmTrainConfig& config, const FmCallback& callback) {
    Optimizer opt(config.optimizer, params.size());
    for (std::size_t it = 0; it < config.iterations; ++it) {
        Rng rng(derive_seed(config.seed, 0xF10, it));
        const auto batch = make_fm_batch(source, config.batch_size, config.t_min, config.t_max, rng);
        const auto lg = fm_loss(params, batch);
        if (!std::isfinite(lg.value) || !lg.grad.all_finite())
            throw DivergenceError("flow matching diverged at iteration " + std::to_string(it));
        const double gnorm = opt.step(params, lg.grad);
        if (callback) callback(it, lg.value, gnorm);
    }
    return params;
}

FmDataSource world_data_source(const TaskWorld& world) {
    std::vector<Condition> all;
    for (TaskId t : kAllTasks)
        for (auto& c : world.conditions(t)) all.push_back(std::move(c));
    return [world, all](Rng& rng) {
        Condition c = all[rng.below(all.size())];
        State x = c.task == TaskId::Ring ? sample_data(world, rng)
                                         : sample_component(world, c.content_index(), rng);
        return FmDatum{std::move(c), std::move(x)};
    };
}

}  // namespace flowopd
