#include "flowopd/flow_core.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace flowopd {

namespace {

std::atomic<double> g_weight_fault{0.0};

void require_same_size(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

void require_open_unit(double t, const char* what) {
    if (!(t > 0.0 && t < 1.0)) throw std::domain_error(std::string(what) + ": t must lie in (0, 1)");
}

}  // namespace

double TimeGrid::time(std::size_t i) const {
    if (i > steps) throw std::out_of_range("TimeGrid::time: index past the grid");
    // Endpoints are exact regardless of rounding in dt.
    if (i == steps) return t_min;
    return t_max - static_cast<double>(i) * dt();
}

std::vector<double> TimeGrid::times() const {
    std::vector<double> ts(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) ts[i] = time(i);
    return ts;
}

void TimeGrid::validate() const {
    if (steps == 0) throw std::invalid_argument("TimeGrid: steps must be positive");
    if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0))
        throw std::invalid_argument("TimeGrid: need 0 < t_min < t_max < 1");
}

State ot_interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
    require_same_size(x0, x1, "ot_interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("ot_interpolate: t outside [0, 1]");
    State out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
    return out;
}

PathSample PathSample::make(State x0, State x1, double t) {
    PathSample p;
    p.x_t = ot_interpolate(x0, x1, t);
    p.target_v.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) p.target_v[i] = x1[i] - x0[i];
    p.x0 = std::move(x0);
    p.x1 = std::move(x1);
    p.t = t;
    return p;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    require_same_size(a, b, "squared_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

LossAndGrad fm_loss(const ParamVector& params, std::span<const FmExample> batch) {
    if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");
    LossAndGrad out{0.0, GradVector(params.size())};
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    std::vector<double> upstream;
    for (const auto& ex : batch) {
        const auto in = model_input(params.arch(), ex.path.x_t, ex.path.t, ex.condition);
        auto v = forward(params, in);
        upstream.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) upstream[i] = 2.0 * inv_n * (v[i] - ex.path.target_v[i]);
        out.value += inv_n * squared_distance(v, ex.path.target_v);
        backward_accumulate(params, in, upstream, out.grad.values);
    }
    return out;
}

double fm_loss_value(const ParamVector& params, std::span<const FmExample> batch) {
    if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");
    double total = 0.0;
    for (const auto& ex : batch)
        total += squared_distance(velocity(params, ex.path.x_t, ex.path.t, ex.condition),
                                  ex.path.target_v);
    return total / static_cast<double>(batch.size());
}

double sigma(double t, const NoiseSchedule& schedule) {
    require_open_unit(t, "sigma");
    return schedule.a * std::sqrt(t / (1.0 - t));
}

State sde_drift(std::span<const double> v, std::span<const double> x, double t, double sigma_t) {
    require_same_size(v, x, "sde_drift");
    if (!(t > 0.0)) throw std::domain_error("sde_drift: t must be positive");
    const double k = sigma_t * sigma_t / (2.0 * t);
    State out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + k * (x[i] + (1.0 - t) * v[i]);
    return out;
}

double velocity_gain(double t, double sigma_t) {
    return 1.0 + sigma_t * sigma_t * (1.0 - t) / (2.0 * t);
}

State transition_mean(std::span<const double> x_t, std::span<const double> v, double t,
                      double dt, double sigma_t) {
    const auto drift = sde_drift(v, x_t, t, sigma_t);
    State mu(x_t.size());
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = x_t[i] - drift[i] * dt;
    return mu;
}

State transition_mean(const ParamVector& params, std::span<const double> x_t, double t,
                      double dt, const NoiseSchedule& schedule, const Condition& c) {
    const auto v = velocity(params, x_t, t, c);
    return transition_mean(x_t, v, t, dt, sigma(t, schedule));
}

State em_step(std::span<const double> x_t, std::span<const double> v, double t, double dt,
              double sigma_t, std::span<const double> noise) {
    require_same_size(x_t, noise, "em_step");
    if (!(dt > 0.0)) throw std::domain_error("em_step: dt must be positive");
    auto next = transition_mean(x_t, v, t, dt, sigma_t);
    const double scale = sigma_t * std::sqrt(dt);
    for (std::size_t i = 0; i < next.size(); ++i) next[i] += scale * noise[i];
    return next;
}

double transition_variance(double sigma_t, double dt) {
    return std::max(sigma_t * sigma_t * dt, kVarianceFloor);
}

double transition_logprob(std::span<const double> x_next, std::span<const double> mu,
                          double variance) {
    require_same_size(x_next, mu, "transition_logprob");
    if (!(variance > 0.0)) throw std::domain_error("transition_logprob: variance must be positive");
    const double d = static_cast<double>(x_next.size());
    return -squared_distance(x_next, mu) / (2.0 * variance) -
           0.5 * d * std::log(2.0 * std::numbers::pi * variance);
}

double gaussian_kl_general(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1,
                           const Eigen::VectorXd& mu2, const Eigen::MatrixXd& s2) {
    const auto d = mu1.size();
    if (mu2.size() != d || s1.rows() != d || s1.cols() != d || s2.rows() != d || s2.cols() != d)
        throw std::invalid_argument("gaussian_kl_general: dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> l1(s1), l2(s2);
    if (l1.info() != Eigen::Success || l2.info() != Eigen::Success || !s1.isApprox(s1.transpose()) ||
        !s2.isApprox(s2.transpose()))
        throw std::invalid_argument("gaussian_kl_general: covariance not symmetric positive definite");
    const Eigen::VectorXd diff = mu1 - mu2;
    const double trace = l2.solve(s1).trace();
    const double maha = diff.dot(l2.solve(diff));
    // log det from the Cholesky diagonals
    const double logdet1 = 2.0 * l1.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const double logdet2 = 2.0 * l2.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return 0.5 * (trace - static_cast<double>(d) + maha + logdet2 - logdet1);
}

double kl_means(std::span<const double> mu_theta, std::span<const double> mu_target,
                double sigma_t, double dt) {
    return squared_distance(mu_theta, mu_target) / (2.0 * transition_variance(sigma_t, dt));
}

double weight_w(double t, double sigma_t, double dt) {
    const double inner = sigma_t * (1.0 - t) / (2.0 * t) + 1.0 / sigma_t;
    return 0.5 * dt * inner * inner * (1.0 + g_weight_fault.load(std::memory_order_relaxed));
}

double kl_velocities(std::span<const double> v_theta, std::span<const double> v_target,
                     double t, double sigma_t, double dt) {
    return weight_w(t, sigma_t, dt) * squared_distance(v_theta, v_target);
}

namespace testing {

ScopedWeightFault::ScopedWeightFault(double relative) : previous_(g_weight_fault.exchange(relative)) {}

ScopedWeightFault::~ScopedWeightFault() { g_weight_fault.store(previous_); }

}  // namespace testing

}  // namespace flowopd
