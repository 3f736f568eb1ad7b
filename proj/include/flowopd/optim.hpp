#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "flowopd/numgrad.hpp"

namespace flowopd {

enum class OptimizerKind { Sgd, Adam };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double learning_rate = 1e-3;
    double grad_clip = 10.0;  // global-norm clip; <= 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Minimizes: params -= lr * direction(grad). Callers doing ascent pass -grad.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::size_t n_params);

    /// Applies one update and returns the gradient norm before clipping.
    double step(ParamVector& params, const GradVector& grad);

    const OptimizerConfig& config() const { return config_; }

private:
    OptimizerConfig config_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace flowopd
