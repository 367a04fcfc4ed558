#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "sparsyfed/data.hpp"
#include "sparsyfed/nn.hpp"
#include "sparsyfed/reparam.hpp"
#include "sparsyfed/sparsity.hpp"

namespace sparsyfed {

struct RoundReport {
    int round = 0;
    double test_accuracy = 0.0;
    double global_sparsity = 0.0;
    std::vector<double> per_layer_sparsity;
    std::size_t downlink_nnz = 0;
    std::size_t uplink_nnz_mean = 0;
    std::size_t cumulative_comm_nnz = 0;
    std::size_t mean_client_regrowth = 0;
    std::optional<SparseMask> mask;  // global model support after aggregation
    double global_l2_from_init = 0.0;
    double round_l2 = 0.0;
    double round_cosine = 0.0;
    double client_cosine_mean = 0.0;
};

struct CommCost {
    std::size_t downlink_nnz = 0;
    std::size_t uplink_nnz_mean = 0;
};

/// Downlink is the nonzero count of the broadcast model; uplink is the mean
/// nonzero count of the transmitted client payloads (rounded to nearest).
CommCost comm_cost(std::span<const double> global_weights, const std::vector<std::vector<double>>& payloads);

/// M[i][j] = mask_iou(masks[i], masks[j]).
std::vector<std::vector<double>> iou_matrix(const std::vector<SparseMask>& masks);

/// cos(a, b); 0 when either vector is all-zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double l2_distance(std::span<const double> a, std::span<const double> b);

struct WeightMovement {
    double global_l2 = 0.0;
    double round_l2 = 0.0;
    double round_cosine = 0.0;
    double client_cosine_mean = 0.0;
};

/// Client cosine is the mean over unordered pairs of updates; fewer than two
/// updates gives 0.
WeightMovement weight_movement(std::span<const double> initial, std::span<const double> before,
                               std::span<const double> after,
                               const std::vector<std::vector<double>>& client_updates);

/// Argmax accuracy on a held-out set; ties go to the lowest class index.
double evaluate(const Model& model, const ReparamSpec& reparam, const LabeledDataset& test);

void write_rounds_csv(const std::filesystem::path& path, const std::vector<RoundReport>& reports);
void write_iou_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& matrix);
void write_layer_sparsity_csv(const std::filesystem::path& path, const std::vector<RoundReport>& reports);

}  // namespace sparsyfed
