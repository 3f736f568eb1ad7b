#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowopd/numgrad.hpp"

namespace flowopd {

using State = std::vector<double>;

/// Synthetic stand-ins for the four benchmark families.
enum class TaskId : int { Region = 0, Ring = 1, Preference = 2, Quality = 3 };

inline constexpr std::array<TaskId, 4> kAllTasks = {TaskId::Region, TaskId::Ring,
                                                    TaskId::Preference, TaskId::Quality};
inline constexpr std::size_t kNumTasks = kAllTasks.size();

std::string_view task_name(TaskId task);
/// Accepts the lower-case names printed by task_name; throws std::invalid_argument.
TaskId parse_task(std::string_view name);

/// A synthetic prompt. Region, Preference and Quality carry a one-hot over
/// mixture components (the "content" of the prompt); Ring carries its radius.
struct Condition {
    TaskId task = TaskId::Region;
    std::vector<double> params;

    static Condition region(std::size_t component, std::size_t n_components);
    static Condition ring(double radius);
    static Condition preference(std::size_t content, std::size_t n_components);
    static Condition quality(std::size_t content, std::size_t n_components);

    /// Index of the hot entry; only for one-hot tasks.
    std::size_t content_index() const;
    double radius() const;
    void validate(std::size_t n_components) const;

    friend bool operator==(const Condition&, const Condition&) = default;
};

std::string describe(const Condition& c);

/// Embedding layout: [task one-hot (4) | content one-hot (n) | ring radius (1)].
std::size_t condition_embedding_dim(std::size_t n_components);

/// Network input width for state dimension d: d + time + embedding.
std::size_t model_input_dim(std::size_t state_dim, std::size_t n_components);

/// Number of content slots implied by an architecture.
std::size_t content_slots(const ArchSpec& arch);

void model_input(const ArchSpec& arch, std::span<const double> x, double t, const Condition& c,
                 std::span<double> out);
std::vector<double> model_input(const ArchSpec& arch, std::span<const double> x, double t,
                                const Condition& c);

/// v_theta(x, t, c).
State velocity(const ParamVector& params, std::span<const double> x, double t,
               const Condition& c);

/// Identifies the exact parameters that sampled a batch (on-policy checks).
std::uint64_t policy_hash(const ParamVector& params);

}  // namespace flowopd
