#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sparsyfed/data.hpp"
#include "sparsyfed/federation.hpp"

namespace sparsyfed {

enum class DatasetKind { synthetic, csv };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::synthetic;
    SyntheticSpec synthetic;
    std::string csv_path;

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

enum class ModelKind { mlp, cnn };

struct ModelSpec {
    ModelKind kind = ModelKind::mlp;
    std::vector<std::size_t> hidden{32, 32};
    std::vector<std::size_t> image{1, 0, 0};  // channels, height, width (cnn)
    std::vector<std::size_t> conv_channels{4, 8};
    std::size_t kernel = 3;

    std::vector<LayerSpec> architecture(std::size_t input_dim, std::size_t classes) const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Sweep axes. An empty target_sparsity axis means "use base.groups as given"
/// (heterogeneous group configs cannot be swept over a scalar target).
struct SweepAxes {
    std::vector<Algorithm> algorithms;
    std::vector<double> target_sparsity;
    std::vector<double> alpha;
    std::vector<bool> activation_pruning;
    std::vector<std::uint64_t> seeds;

    friend bool operator==(const SweepAxes&, const SweepAxes&) = default;
};

struct ExperimentSpec {
    FedConfig base;
    double alpha = 1.0;
    DatasetSpec dataset;
    ModelSpec model;
    SweepAxes sweep;
    std::string output_dir = "results";

    void validate() const;

    friend bool operator==(const ExperimentSpec&, const ExperimentSpec&) = default;
};

/// Parse TOML text. Unknown keys, missing required keys and type mismatches
/// throw ConfigError naming the offending key path.
ExperimentSpec parse_config_string(std::string_view text, std::string_view source = "config");
ExperimentSpec parse_config(const std::filesystem::path& path);

nlohmann::json to_json(const ExperimentSpec& spec);
nlohmann::json to_json(const FedConfig& cfg);
ExperimentSpec experiment_from_json(const nlohmann::json& j);

}  // namespace sparsyfed
