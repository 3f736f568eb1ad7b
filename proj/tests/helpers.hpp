#pragma once

#include <cmath>
#include <vector>

#include "flowopd/fm_training.hpp"
#include "flowopd/numgrad.hpp"
#include "flowopd/rollout.hpp"

namespace testutil {

using namespace flowopd;

inline ArchSpec arch_for(const TaskWorld& w, std::vector<std::size_t> hidden) {
    return {model_input_dim(w.dim(), w.components()), std::move(hidden), w.dim(), Activation::Tanh};
}

inline ParamVector gaussian_params(const ArchSpec& arch, std::uint64_t seed, double scale = 0.5) {
    ParamVector p(arch);
    Rng rng(seed);
    for (auto& v : p.values()) v = scale * rng.normal();
    return p;
}

// A quick conditional FM fit on the default world, shared by tests that need a
// model that actually generates the mixture.
inline ParamVector quick_pretrained(std::size_t iterations = 1500, std::vector<std::size_t> hidden = {32, 32}) {
    const auto world = default_world();
    FmTrainConfig cfg;
    cfg.iterations = iterations;
    cfg.seed = 99;
    return fit_flow_matching(init_params(arch_for(world, std::move(hidden)), 3), world_data_source(world), cfg);
}

inline double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace testutil
