#pragma once

// On-policy distillation from routed task experts, plus the anchor penalty.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowopd/evaluation.hpp"
#include "flowopd/flow_core.hpp"
#include "flowopd/grpo.hpp"
#include "flowopd/optim.hpp"
#include "flowopd/rollout.hpp"

namespace flowopd {

/// task -> expert key. Hard routing: a task maps to exactly one expert.
class RoutingTable {
public:
    RoutingTable() = default;
    explicit RoutingTable(std::map<TaskId, std::string> table) : table_(std::move(table)) {}

    /// Every task routed to the expert named after it.
    static RoutingTable by_task_name();

    void set(TaskId task, std::string key) { table_[task] = std::move(key); }
    bool contains(TaskId task) const { return table_.count(task) != 0; }
    const std::map<TaskId, std::string>& entries() const { return table_; }

    friend bool operator==(const RoutingTable&, const RoutingTable&) = default;

private:
    std::map<TaskId, std::string> table_;
};

/// Throws RoutingError for an unrouted task.
const std::string& route(const Condition& c, const RoutingTable& table);

struct TeacherEnsemble {
    std::map<std::string, ParamVector> experts;
    std::optional<ParamVector> anchor;
    RoutingTable routing;

    const ParamVector& expert_for(const Condition& c) const;
    /// Every routed key resolves and every model has the student's architecture.
    void validate(const ArchSpec& student) const;
    std::vector<TaskId> routed_tasks() const;
};

/// Velocity of the routed expert; a constant as far as the student is concerned.
State target_velocity(const TeacherEnsemble& ensemble, const Condition& c,
                      std::span<const double> x_t, double t);

enum class AnchorScope { OnPolicyStates, FullData };

std::string_view anchor_scope_name(AnchorScope scope);
AnchorScope parse_anchor_scope(std::string_view name);

struct OpdConfig {
    double lambda = 0.02;
    std::size_t group_size = 8;
    std::size_t conditions_per_iter = 8;
    double learning_rate = 2e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double grad_clip = 10.0;
    std::size_t iterations = 200;
    AnchorScope anchor_scope = AnchorScope::FullData;
    std::size_t mar_probes = 256;  // full-data scope only
    std::size_t eval_every = 50;
    std::uint64_t seed = 23;
    std::size_t threads = 1;

    void validate() const;
    friend bool operator==(const OpdConfig&, const OpdConfig&) = default;
};

/// Mean over every visited (non-final) state of w(t) ||v_theta - v_target||^2.
/// Throws OffPolicyError if any group was sampled by other parameters.
LossAndGrad flow_opd_loss(const ParamVector& student, const TeacherEnsemble& ensemble,
                          std::span<const Group> groups);

/// The score-function form of the same update, kept as a cross-check.
/// score_term: mean over states of grad log pi(x_next | x_t) * (-KL(x_t)).
/// direct_term: mean over states of grad(-KL(x_t)) through the transition means.
struct PgOpdGradient {
    GradVector score_term;
    GradVector direct_term;
    double mean_kl = 0.0;
};

PgOpdGradient pg_opd_gradient(const ParamVector& student, const TeacherEnsemble& ensemble,
                              std::span<const Group> groups);

/// Empirical mean and per-coordinate std of grad log pi(a | x_t) * (-KL(x_t))
/// over n fresh actions at one fixed state.
struct ScoreNullityReport {
    GradVector mean;
    std::vector<double> stddev;
    std::size_t samples = 0;
    double mean_norm = 0.0;
    double std_norm = 0.0;  // || per-coordinate std ||_2
    /// mean_norm <= k * std_norm / sqrt(samples)
    bool within(double k) const;
};

ScoreNullityReport score_term_nullity(const ParamVector& student, const TeacherEnsemble& ensemble,
                                      std::span<const double> x_t, double t, double dt,
                                      const Condition& c, const NoiseSchedule& schedule,
                                      std::size_t n, std::uint64_t seed);

/// A state at which the anchor penalty is evaluated.
struct ProbeState {
    State x_t;
    double t = 0.5;
    double dt = 0.1;
    Condition condition;
};

/// Visited states of the groups (the on-policy scope).
std::vector<ProbeState> on_policy_probes(std::span<const Group> groups);

/// OT-path states over every condition template of the world at grid times.
std::vector<ProbeState> full_data_probes(const TaskWorld& world, const TimeGrid& grid,
                                         std::size_t n, std::uint64_t seed);

/// Mean of w(t) ||v_theta - v_anchor||^2 over the probes (not multiplied by lambda).
LossAndGrad mar_loss(const ParamVector& student, const ParamVector& anchor,
                     std::span<const ProbeState> probes, const NoiseSchedule& schedule = {});

double anchor_discrepancy(const ParamVector& student, const ParamVector& anchor,
                          std::span<const ProbeState> probes, const NoiseSchedule& schedule = {});

struct OpdLoss {
    double opd = 0.0;
    double mar = 0.0;
    double total = 0.0;
    GradVector grad;
};

/// flow_opd_loss + lambda * mar_loss. MAR needs ensemble.anchor when lambda > 0.
OpdLoss total_loss(const ParamVector& student, const TeacherEnsemble& ensemble,
                   std::span<const Group> groups, std::span<const ProbeState> probes,
                   const OpdConfig& config);

struct OpdIterationStats {
    std::size_t iteration = 0;
    double opd_loss = 0.0;
    double mar_loss = 0.0;
    double grad_norm = 0.0;
    std::optional<EvalReport> eval;
    std::optional<double> anchor_discrepancy;  // on the fixed full-data probe set
    double wall_seconds = 0.0;
};

using OpdCallback = std::function<void(const OpdIterationStats&)>;

/// Conditions are drawn over every routed task; the student samples its own
/// groups each iteration and regresses onto the routed teachers.
ParamVector train_student(const ParamVector& cold, const TeacherEnsemble& ensemble,
                          const OpdConfig& config, const TrainContext& ctx,
                          const OpdCallback& callback = {});

}  // namespace flowopd
