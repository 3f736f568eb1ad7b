#pragma once

// Flow-matching and SDE-sampling math.
//
// Time convention: the data endpoint sits at t = 0 and the noise endpoint at
// t = 1, so x_t = (1 - t) x0 + t x1 with x0 the data point and x1 the noise
// draw, and the regression target is x1 - x0. Generation walks a descending
// grid t_max -> t_min, each transition taking x_t to x_{t - dt}.

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "flowopd/condition.hpp"
#include "flowopd/numgrad.hpp"

namespace flowopd {

struct NoiseSchedule {
    double a = 0.7;

    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

struct TimeGrid {
    std::size_t steps = 10;
    double t_min = 0.02;
    double t_max = 0.98;

    double dt() const { return (t_max - t_min) / static_cast<double>(steps); }
    /// i-th grid point, i in [0, steps]; time(0) = t_max.
    double time(std::size_t i) const;
    std::vector<double> times() const;
    void validate() const;

    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

struct PathSample {
    State x0;  // data endpoint
    State x1;  // noise endpoint
    double t = 0.0;
    State x_t;
    State target_v;

    static PathSample make(State x0, State x1, double t);
};

State ot_interpolate(std::span<const double> x0, std::span<const double> x1, double t);

struct FmExample {
    PathSample path;
    Condition condition;
};

struct LossAndGrad {
    double value = 0.0;
    GradVector grad;
};

/// Mean over the batch of ||v(x_t, t, c) - (x1 - x0)||^2, with its gradient.
LossAndGrad fm_loss(const ParamVector& params, std::span<const FmExample> batch);
double fm_loss_value(const ParamVector& params, std::span<const FmExample> batch);

/// sigma_t = a * sqrt(t / (1 - t)); t must lie in (0, 1).
double sigma(double t, const NoiseSchedule& schedule);

/// v + sigma^2/(2t) * (x + (1 - t) v)
State sde_drift(std::span<const double> v, std::span<const double> x, double t, double sigma_t);

/// d(drift)/dv = 1 + sigma^2 (1 - t) / (2t), a scalar multiple of identity.
double velocity_gain(double t, double sigma_t);

/// x_{t-dt} = x_t - drift * dt + sigma_t sqrt(dt) noise, dt > 0.
State em_step(std::span<const double> x_t, std::span<const double> v, double t, double dt,
              double sigma_t, std::span<const double> noise);

State transition_mean(std::span<const double> x_t, std::span<const double> v, double t,
                      double dt, double sigma_t);
State transition_mean(const ParamVector& params, std::span<const double> x_t, double t,
                      double dt, const NoiseSchedule& schedule, const Condition& c);

inline constexpr double kVarianceFloor = 1e-8;

/// sigma_t^2 dt, floored at kVarianceFloor.
double transition_variance(double sigma_t, double dt);

/// log N(x_next; mu, variance I).
double transition_logprob(std::span<const double> x_next, std::span<const double> mu,
                          double variance);

/// KL(N(mu1, s1) || N(mu2, s2)). Throws std::invalid_argument for non-PD covariances.
double gaussian_kl_general(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1,
                           const Eigen::VectorXd& mu2, const Eigen::MatrixXd& s2);

/// KL between two transition policies sharing covariance sigma_t^2 dt I.
double kl_means(std::span<const double> mu_theta, std::span<const double> mu_target,
                double sigma_t, double dt);

/// w(t) = dt/2 * (sigma_t (1 - t) / (2t) + 1 / sigma_t)^2
double weight_w(double t, double sigma_t, double dt);

/// w(t) ||v_theta - v_target||^2
double kl_velocities(std::span<const double> v_theta, std::span<const double> v_target,
                     double t, double sigma_t, double dt);

double squared_distance(std::span<const double> a, std::span<const double> b);

namespace testing {

/// Scales weight_w by (1 + relative) while alive. Lets the verification suite
/// prove it notices a corrupted weight formula.
class ScopedWeightFault {
public:
    explicit ScopedWeightFault(double relative);
    ~ScopedWeightFault();
    ScopedWeightFault(const ScopedWeightFault&) = delete;
    ScopedWeightFault& operator=(const ScopedWeightFault&) = delete;

private:
    double previous_;
};

}  // namespace testing

}  // namespace flowopd
