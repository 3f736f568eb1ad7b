#include "flowopd/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowopd {

std::string_view optimizer_name(OptimizerKind kind) {
    return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::size_t n_params) : config_(config) {
    if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
    if (config_.kind == OptimizerKind::Adam) {
        m_.assign(n_params, 0.0);
        v_.assign(n_params, 0.0);
    }
}

double Optimizer::step(ParamVector& params, const GradVector& grad) {
    if (grad.size() != params.size()) throw std::invalid_argument("optimizer: gradient size mismatch");
    const double norm = grad.norm();
    double scale = 1.0;
    if (config_.grad_clip > 0.0 && norm > config_.grad_clip) scale = config_.grad_clip / norm;
    const double lr = config_.learning_rate;
    if (config_.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * scale * grad[i];
        return norm;
    }
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = scale * grad[i];
        m_[i] = b1 * m_[i] + (1.0 - b1) * g;
        v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.epsilon);
    }
    return norm;
}

}  // namespace flowopd
