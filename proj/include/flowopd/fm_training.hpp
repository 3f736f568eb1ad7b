#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flowopd/condition.hpp"
#include "flowopd/flow_core.hpp"
#include "flowopd/optim.hpp"
#include "flowopd/random.hpp"
#include "flowopd/rewards.hpp"

namespace flowopd {

struct FmTrainConfig {
    std::size_t iterations = 3000;
    std::size_t batch_size = 128;
    OptimizerConfig optimizer{OptimizerKind::Adam, 2e-3, 10.0};
    double t_min = 0.02;  // t ~ Uniform(t_min, t_max)
    double t_max = 0.98;
    std::uint64_t seed = 7;

    friend bool operator==(const FmTrainConfig&, const FmTrainConfig&) = default;
};

/// A data point paired with the condition it is generated under.
struct FmDatum {
    Condition condition;
    State x;
};

using FmDataSource = std::function<FmDatum(Rng&)>;

/// Path samples with fresh noise and t ~ Uniform(t_min, t_max).
std::vector<FmExample> make_fm_batch(const FmDataSource& source, std::size_t n, double t_min,
                                     double t_max, Rng& rng);
std::vector<FmExample> make_fm_batch(std::span<const FmDatum> data, double t_min, double t_max,
                                     Rng& rng);

using FmCallback = std::function<void(std::size_t iteration, double loss, double grad_norm)>;

/// Minimizes fm_loss on fresh minibatches from `source`. Throws
/// DivergenceError on a non-finite loss.
ParamVector fit_flow_matching(ParamVector init, const FmDataSource& source,
                              const FmTrainConfig& config, const FmCallback& callback = {});

/// Conditions uniform over every template of the world. One-hot conditions
/// draw from the component they name, ring conditions from all of p_data.
FmDataSource world_data_source(const TaskWorld& world);

}  // namespace flowopd
