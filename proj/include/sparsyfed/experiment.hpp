#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sparsyfed/config.hpp"
#include "sparsyfed/federation.hpp"

namespace sparsyfed {

/// One point of the sweep grid.
struct RunCell {
    Algorithm algorithm = Algorithm::sparsyfed;
    std::optional<double> target;  // empty: heterogeneous groups from the base config
    double alpha = 1.0;
    bool activation_pruning = true;
    std::uint64_t seed = 5378;

    /// Directory name, stable across runs: e.g. "sparsyfed_s0.9_a0.1_apon_seed5378".
    std::string name() const;
    /// Same as name() without the seed; cells sharing it are aggregated in summary.csv.
    std::string group_name() const;
};

/// Cartesian product of the sweep axes in a fixed order
/// (algorithm, target, alpha, activation pruning, seed).
std::vector<RunCell> resolve_runs(const ExperimentSpec& spec);

FedConfig make_run_config(const ExperimentSpec& spec, const RunCell& cell);

/// Dataset, partition and initial model for one cell. Seeds depend only on the
/// global seed (and alpha for the partition), so cells differing in algorithm,
/// sparsity or seed share data and initialization.
struct PreparedRun {
    FederatedData data;
    Model initial;
};

PreparedRun prepare_run(const ExperimentSpec& spec, const RunCell& cell);

struct RunOutcome {
    RunCell cell;
    bool ok = false;
    std::string error;
    double final_accuracy = 0.0;
    double final_sparsity = 0.0;
    std::size_t cumulative_comm_nnz = 0;
};

/// Execute a single cell and write rounds.csv, iou_matrix.csv,
/// layer_sparsity.csv and summary.json into `dir`.
RunOutcome execute_run(const ExperimentSpec& spec, const RunCell& cell, const std::filesystem::path& dir);

/// Run every cell with at most `jobs` concurrent runs, then write summary.csv.
/// Returns 0 when every run succeeded, 1 otherwise.
int run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir, std::size_t jobs,
                   std::ostream& log);

void write_summary_csv(const std::filesystem::path& path, const std::vector<RunOutcome>& outcomes);

}  // namespace sparsyfed
