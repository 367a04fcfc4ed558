#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparsyfed/data.hpp"
#include "sparsyfed/metrics.hpp"
#include "sparsyfed/nn.hpp"
#include "sparsyfed/reparam.hpp"
#include "sparsyfed/sparsity.hpp"

namespace sparsyfed {

enum class Algorithm { sparsyfed, topk, zerofl, flash, naive_powerprop, dense };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& name);

enum class Weighting { uniform, samples };

std::string to_string(Weighting w);
Weighting weighting_from_string(const std::string& name);

/// Contiguous block of client ids sharing one target sparsity.
struct SparsityGroup {
    std::size_t clients = 0;
    double target = 0.0;

    friend bool operator==(const SparsityGroup&, const SparsityGroup&) = default;
};

struct FedConfig {
    int rounds = 0;
    std::size_t clients_total = 100;
    std::size_t clients_per_round = 10;
    int local_epochs = 1;
    std::size_t batch_size = 16;
    std::vector<SparsityGroup> groups{{100, 0.9}};
    Algorithm algorithm = Algorithm::sparsyfed;
    ReparamSpec reparam{ReparamKind::powerprop, 1.25};
    bool activation_pruning = true;
    double lr_start = 0.5;
    double lr_end = 0.01;
    std::uint64_t sampling_seed = 5378;
    std::uint64_t global_seed = 1337;
    Weighting weighting = Weighting::uniform;
    int mask_every = 1;  // keep the global mask every k-th round for the IoU matrix
    std::size_t client_threads = 1;

    void validate() const;
    /// Target sparsity for `client_id` according to its group.
    double target_for(std::size_t client_id) const;
    /// Replace the groups with a single group covering every client.
    void set_uniform_target(double target);
    /// Reparametrization the algorithm actually trains with.
    ReparamSpec effective_reparam() const;

    friend bool operator==(const FedConfig&, const FedConfig&) = default;
};

struct FederatedData {
    LabeledDataset train;
    LabeledDataset test;
    ClientPartition partition;
};

/// One unit of client work: which client, which round, how hard to prune.
struct ClientTask {
    std::size_t client_id = 0;
    int round = 0;
    double eta = 0.0;
    double target = 0.0;
    std::uint64_t seed = 0;
    std::span<const std::size_t> indices;
};

/// What a client sends back. `weights` is the transmitted (flattened, usually
/// sparse) model; `pseudo_gradient` is weights - ω_t.
struct ClientUpdate {
    std::size_t client_id = 0;
    double target = 0.0;
    std::size_t num_samples = 0;
    std::vector<double> weights;
    std::vector<Tensor> biases;
    std::vector<double> pseudo_gradient;
    std::size_t nnz = 0;
    std::size_t regrowth = 0;
    SparseMask mask_before;  // support of the received model
    SparseMask mask_after;   // support after local training, before pruning
};

enum class ActivationPruning { off, weight_sparsity, uniform };

struct LocalTrainOptions {
    ReparamSpec reparam;
    ActivationPruning activation = ActivationPruning::off;
    double uniform_sparsity = 0.0;       // used by ActivationPruning::uniform and swat_weights
    bool swat_weights = false;           // per-layer Top-K on a working copy before each forward
    const SparseMask* gradient_mask = nullptr;
    int epochs = 1;
    std::size_t batch_size = 16;
    double eta = 0.0;
    std::uint64_t seed = 0;
};

struct StepObservation {
    int epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
    const Model& forward_model;   // weights the forward pass saw
    const ForwardTrace& trace;    // after activation pruning
    const Model& updated_model;   // after the optimizer step
};

using StepObserver = std::function<void(const StepObservation&)>;

/// Local mini-batch SGD over `indices` for `epochs` epochs.
Model train_locally(Model start, const LabeledDataset& data, std::span<const std::size_t> indices,
                    const LocalTrainOptions& options, const StepObserver& observer = {});

ClientUpdate client_sparsyfed(const Model& global, const LabeledDataset& data, const ClientTask& task,
                              const FedConfig& cfg, const StepObserver& observer = {});
ClientUpdate client_topk(const Model& global, const LabeledDataset& data, const ClientTask& task,
                         const FedConfig& cfg, const StepObserver& observer = {});
ClientUpdate client_zerofl(const Model& global, const LabeledDataset& data, const ClientTask& task,
                           const FedConfig& cfg, const StepObserver& observer = {});
ClientUpdate client_flash(const Model& global, const LabeledDataset& data, const ClientTask& task,
                          const FedConfig& cfg, const SparseMask* fixed_mask,
                          const StepObserver& observer = {});
ClientUpdate client_naive_powerprop(const Model& global, const LabeledDataset& data, const ClientTask& task,
                                    const FedConfig& cfg, const StepObserver& observer = {});
ClientUpdate client_dense(const Model& global, const LabeledDataset& data, const ClientTask& task,
                          const FedConfig& cfg, const StepObserver& observer = {});

/// ω_t + Σ w_i Δ_i with w_i = 1/|S| (or the given weights, which must sum to 1).
std::vector<double> aggregate_fedavg(std::span<const double> base, const std::vector<std::vector<double>>& updates,
                                     std::span<const double> weights = {});

/// Per coordinate: base + Σ_i Δ_i / max(1, #{i : Δ_i != 0}).
std::vector<double> aggregate_nonzero_avg(std::span<const double> base,
                                          const std::vector<std::vector<double>>& updates);

/// Fixed FLASH mask from per-layer mean client sparsities: keep fractions
/// clamp(r (1 - d_l), 0, 1) with r found by bisection so the global keep budget
/// equals keep_count(n, target). Per-layer Top-K on `aggregated` picks the
/// survivors.
SparseMask flash_sensitivity_mask(const Model& aggregated,
                                  const std::vector<std::vector<double>>& client_layer_sparsities,
                                  double target);

/// Uniform sample without replacement, sorted, deterministic in (seed, round).
std::vector<std::size_t> sample_clients(std::size_t population, std::size_t count, int round,
                                        std::uint64_t seed);

struct FederationResult {
    std::vector<RoundReport> reports;
    Model final_model;
    std::optional<SparseMask> flash_mask;
};

using UpdateObserver = std::function<void(int round, const ClientUpdate&)>;

/// The full round loop: sample, broadcast, local training, aggregate, evaluate.
FederationResult run_federation(const FedConfig& cfg, const FederatedData& data, const Model& initial,
                                const UpdateObserver& on_update = {});

}  // namespace sparsyfed
