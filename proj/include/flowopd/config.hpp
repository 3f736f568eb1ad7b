#pragma once

// Versioned JSON experiment configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowopd/coldstart.hpp"
#include "flowopd/fm_training.hpp"
#include "flowopd/grpo.hpp"
#include "flowopd/opd.hpp"

namespace flowopd {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kConfigSchema = "flowopd-experiment";

enum class ColdstartMode { Sft, Merge };

std::string_view coldstart_mode_name(ColdstartMode mode);
ColdstartMode parse_coldstart_mode(std::string_view name);

struct MixSettings {
    MixMode mode = MixMode::ScalarMix;
    std::size_t iterations = 0;  // 0: same budget as opd.iterations
    RewardWeights ratios{{TaskId::Region, 3.0}, {TaskId::Ring, 1.0}, {TaskId::Preference, 1.0}};
    friend bool operator==(const MixSettings&, const MixSettings&) = default;
};

struct ColdstartSettings {
    ColdstartMode mode = ColdstartMode::Sft;
    std::size_t per_condition = 64;          // SFT samples per condition template
    std::vector<double> merge_weights;       // empty: uniform over the task experts
    SftConfig sft;
    friend bool operator==(const ColdstartSettings&, const ColdstartSettings&) = default;
};

struct DiagSettings {
    TaskId task_a = TaskId::Region;
    TaskId task_b = TaskId::Preference;
    std::size_t probe_groups = 256;
    std::size_t group_size = 24;
    friend bool operator==(const DiagSettings&, const DiagSettings&) = default;
};

/// Everything a run depends on. Phase seeds are not stored: they are derived
/// from the master seed by apply_master_seed().
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};  // repeated diagnostics
    std::string output_dir = "runs/default";
    std::size_t threads = 1;

    TaskWorld world = default_world();
    std::vector<std::size_t> hidden_widths{64, 64};
    TimeGrid grid;
    NoiseSchedule schedule;
    EvalConfig eval;

    FmTrainConfig pretrain;
    GrpoConfig grpo;
    MixSettings mix;
    ColdstartSettings coldstart;
    OpdConfig opd;
    DiagSettings diag;

    ExperimentConfig();

    std::size_t mix_iterations() const { return mix.iterations ? mix.iterations : opd.iterations; }

    ArchSpec arch() const;
    TrainContext context() const;
    /// Re-derives every phase seed from `seed`.
    void apply_master_seed();
    /// Throws ConfigError describing the first invalid field.
    void validate() const;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Seed of a training phase; teachers also mix in their task.
enum class Phase : std::uint64_t { Pretrain = 1, Teacher, Mix, SftData, Sft, Opd, Diag };
std::uint64_t phase_seed(std::uint64_t master, Phase phase, std::uint64_t sub = 0);

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);

std::string serialize_config(const ExperimentConfig& config);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

}  // namespace flowopd
