#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "sparsyfed/nn.hpp"
#include "sparsyfed/tensor.hpp"

namespace sparsyfed {

enum class Split { train, test };

struct LabeledDataset {
    Tensor inputs;            // [N, d]
    std::vector<int> labels;  // N entries in [0, num_classes)
    int num_classes = 0;
    Split split = Split::train;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const { return inputs.dim(1); }
    void validate() const;
};

struct SyntheticSpec {
    int classes = 10;
    std::size_t dim = 20;
    std::size_t per_class = 100;
    double margin = 3.0;

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Gaussian clusters: each class mean is a random direction scaled to `margin`,
/// samples add unit isotropic noise. Stratified 80/20 train/test split.
std::pair<LabeledDataset, LabeledDataset> make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Header row, float feature columns, integer label in the last column.
LabeledDataset load_csv(const std::filesystem::path& path);

/// Stratified 80/20 split of a loaded dataset (at least one test sample per class).
std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& all, std::uint64_t seed);

struct ClientPartition {
    std::vector<std::vector<std::size_t>> clients;

    std::size_t num_clients() const noexcept { return clients.size(); }
    std::size_t total() const noexcept;
};

/// Class-wise Dirichlet(alpha) allocation of sample indices to clients. A draw
/// that leaves any client empty is repeated with a derived seed, up to 100 times.
ClientPartition lda_partition(std::span<const int> labels, int num_classes, std::size_t num_clients,
                              double alpha, std::uint64_t seed);

/// Shuffled traversal of `indices` in batches of `batch_size`; last batch may be
/// partial. Fully determined by `seed`.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> indices,
                                                   std::size_t batch_size, std::uint64_t seed);

Batch gather_batch(const LabeledDataset& data, std::span<const std::size_t> indices);

/// Per-client label histogram normalised to a distribution.
std::vector<double> label_distribution(std::span<const int> labels, std::span<const std::size_t> indices,
                                       int num_classes);

double total_variation(std::span<const double> p, std::span<const double> q);

/// Mean pairwise total-variation distance between client label distributions.
double mean_pairwise_tv(const ClientPartition& partition, std::span<const int> labels, int num_classes);

}  // namespace sparsyfed
