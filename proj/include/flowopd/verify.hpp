#pragma once

// Oracle suite behind `flowopd verify`: every check reports what it measured
// against its tolerance.

#include <cstdint>
#include <string>
#include <vector>

#include "flowopd/config.hpp"

namespace flowopd {

struct CheckResult {
    std::string name;
    double measured = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct VerifyOptions {
    std::uint64_t seed = 1;
    std::size_t kl_instances = 1000;
    std::size_t mc_pairs = 20;
    std::size_t mc_samples = 1'000'000;
    std::size_t grad_instances = 50;
    std::size_t identity_batches = 20;
    std::size_t nullity_samples = 10'000;
    std::size_t nullity_states = 4;
    std::vector<std::size_t> hidden_widths{8, 8};  // small nets keep finite differences cheap
    double weight_fault = 0.0;                     // != 0 corrupts w(t) for the whole run
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_passed() const;
};

/// Closed-form KL (full-covariance form, mean form, velocity form) agree.
CheckResult check_kl_chain(const ExperimentConfig& config, const VerifyOptions& opt);
/// Mean-form KL against a Monte-Carlo estimate; measured is the worst |z|.
CheckResult check_mc_kl(const ExperimentConfig& config, const VerifyOptions& opt);
/// fm_loss, flow_opd_loss, mar_loss and transition log-prob vs central differences.
std::vector<CheckResult> check_gradients(const ExperimentConfig& config, const VerifyOptions& opt);
/// Direct KL gradient == distillation gradient, and the score term averages to zero.
std::vector<CheckResult> check_score_identity(const ExperimentConfig& config, const VerifyOptions& opt);
std::vector<CheckResult> check_merge_identities(const ExperimentConfig& config, const VerifyOptions& opt);
/// The distillation gradient treats the teacher as a constant.
CheckResult check_stop_gradient(const ExperimentConfig& config, const VerifyOptions& opt);

VerifyReport run_verification(const ExperimentConfig& config, const VerifyOptions& opt = {});

std::string format_check(const CheckResult& c);

}  // namespace flowopd
