#pragma once

// Orchestration behind the CLI subcommands. Each command reads its inputs from
// explicit paths (or the conventional names inside the run directory), writes
// new artifacts into the run directory and never overwrites a checkpoint.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flowopd/config.hpp"
#include "flowopd/evaluation.hpp"

namespace flowopd {

namespace fs = std::filesystem;

/// Artifact names inside a run directory.
namespace artifact {
inline constexpr const char* kPretrain = "pretrain.ckpt";
inline constexpr const char* kSchema = "metrics_schema.json";
inline constexpr const char* kSftTable = "sft_dataset.tsv";
inline constexpr const char* kStudent = "student_opd.ckpt";
std::string teacher(TaskId task);           // teacher_<task>.ckpt
std::string coldstart(ColdstartMode mode);  // coldstart_<mode>.ckpt
std::string mix(MixMode mode);              // mix_<mode>.ckpt
}  // namespace artifact

/// Thrown instead of overwriting an existing artifact.
class ArtifactExists : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunContext {
    ExperimentConfig config;
    fs::path out;
    bool deterministic = false;
    std::ostream* log = nullptr;  // progress lines; null = quiet

    /// threads = 1 in deterministic mode, config.threads otherwise.
    std::size_t threads() const { return deterministic ? 1 : config.threads; }
    fs::path path(const std::string& name) const { return out / name; }
};

struct PretrainResult {
    ParamVector params;
    double heldout_before = 0.0;
    double heldout_after = 0.0;
    std::size_t modes_covered = 0;  // of world.components()
};

PretrainResult cmd_pretrain_fm(const RunContext& run);

/// Trains the listed tasks' teachers (all four when empty) from `init`
/// (default: the run's pretrain checkpoint).
std::map<TaskId, ParamVector> cmd_train_teachers(const RunContext& run, std::span<const TaskId> tasks = {},
                                                 const fs::path& init = {});

struct ColdstartResult {
    ParamVector params;
    ColdstartMode mode = ColdstartMode::Sft;
    std::optional<SftResult> sft;
};

/// Teachers come from `teachers_dir` (default: the run directory).
ColdstartResult cmd_coldstart(const RunContext& run, ColdstartMode mode, const fs::path& teachers_dir = {},
                              const fs::path& init = {});

/// Experts routed by task; the quality teacher doubles as the MAR anchor.
TeacherEnsemble load_ensemble(const fs::path& teachers_dir);

ParamVector cmd_train_opd(const RunContext& run, const fs::path& cold = {}, const fs::path& teachers_dir = {});

ParamVector cmd_baseline_mix(const RunContext& run, MixMode mode, const fs::path& init = {});

EvalReport cmd_eval(const RunContext& run, const fs::path& checkpoint);

struct DiagResult {
    std::vector<std::uint64_t> seeds;
    std::vector<InterferenceReport> reports;
    std::size_t negative = 0;  // seeds with cosine < 0
};

DiagResult cmd_diag_interference(const RunContext& run, const fs::path& checkpoint, TaskId task_a,
                                 TaskId task_b);

/// Column documentation for every CSV a run can emit.
nlohmann::json metrics_schema();

}  // namespace flowopd
