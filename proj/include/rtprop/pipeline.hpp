#pragma once

// Command implementations behind the CLI. Every command writes into one run
// directory; files are written atomically and removed again when the command
// fails.

#include "rtprop/analysis.hpp"
#include "rtprop/iafm.hpp"
#include "rtprop/ingest.hpp"
#include "rtprop/lmm.hpp"
#include "rtprop/simulate.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rtprop {

struct PipelineConfig {
    std::string input;      // transaction file for ingest
    std::string steps;      // step table; defaults to <run>/steps.csv
    std::string output_dir = "runs";
    std::string run_name;   // empty: <UTC timestamp>_<config hash>

    TransactionSchema schema;
    double session_gap_minutes = 30.0;
    MultiKcMode multi_kc = MultiKcMode::Replicate;
    std::optional<double> winsorize_quantile;
    int slices = 4;

    LmmSpec lmm;
    IafmSpec iafm;
    int min_obs_per_slice = 3;
    bool include_unconverged = false;
    int threads = 0;

    std::uint64_t seed = 1;
    SimConfig sim;
};

// Canonical JSON of the settings that determine results (paths of the run
// directory itself are excluded).
std::string canonical_config(const PipelineConfig& config);
// 16 hex digits, FNV-1a over the canonical JSON.
std::string config_hash(const PipelineConfig& config);

std::filesystem::path resolve_run_dir(const PipelineConfig& config);

enum class FitModel { Rt, Iafm };
enum class FitScope { Global, BySlice };

struct CommandResult {
    std::filesystem::path run_dir;
    std::vector<std::filesystem::path> files;
    std::vector<std::string> warnings;
};

CommandResult cmd_simulate(const PipelineConfig& config);
CommandResult cmd_ingest(const PipelineConfig& config);
CommandResult cmd_fit(const PipelineConfig& config, FitModel model, FitScope scope);
CommandResult cmd_analyze(const PipelineConfig& config);
// simulate (when no input is given) + ingest + analyze in one run directory.
CommandResult cmd_report(const PipelineConfig& config);

// JSON renderings shared with tests.
std::string lmm_fit_json(const LmmFit& fit, const std::string& hash);
std::string iafm_fit_json(const IafmFit& fit, const std::string& hash);
std::string ground_truth_json(const GroundTruth& truth, const std::string& hash);
std::string quality_json(const QualityReport& q, const std::string& hash);

// Reads parameter tables written by cmd_fit.
std::vector<BlupRow> read_rt_student_table(const std::filesystem::path& path);
std::vector<StudentIafmRow> read_iafm_student_table(const std::filesystem::path& path);

} // namespace rtprop
