#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparsyfed/reparam.hpp"
#include "sparsyfed/tensor.hpp"

namespace sparsyfed {

enum class LayerKind { dense, conv2d };
enum class Activation { relu, none };

/// One parameterized layer. Dense layers map [B, in] -> [B, out] with weights
/// [out, in]. Conv layers are stride 1, no padding, weights [out_ch, in_ch, k, k],
/// and map [B, in_ch, h, w] -> [B, out_ch, h-k+1, w-k+1]. Anything feeding a dense
/// layer is flattened row-major.
struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t in_height = 0;
    std::size_t in_width = 0;
    Activation activation = Activation::relu;
    bool has_bias = true;

    static LayerSpec dense(std::size_t in, std::size_t out, Activation act = Activation::relu,
                           bool bias = true);
    static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                            std::size_t height, std::size_t width,
                            Activation act = Activation::relu, bool bias = true);

    std::size_t out_height() const;
    std::size_t out_width() const;
    std::size_t input_size() const;   // per sample
    std::size_t output_size() const;  // per sample
    std::vector<std::size_t> weight_shape() const;
    std::size_t bias_size() const;

    void validate() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Checks dims and chaining; the last layer must emit logits (no activation).
void validate_architecture(const std::vector<LayerSpec>& layers);

/// MLP: input -> hidden... -> classes.
std::vector<LayerSpec> mlp_architecture(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                        std::size_t classes);

/// Two valid-padding convs followed by a dense classifier.
std::vector<LayerSpec> cnn_architecture(std::size_t channels, std::size_t height, std::size_t width,
                                        const std::vector<std::size_t>& conv_channels,
                                        std::size_t kernel, std::size_t classes);

struct Gradients {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
};

/// Raw (pre-reparametrization) weights plus biases. Flattened parameter order is
/// layer order, then row-major within each weight tensor; biases are never part
/// of it. Every mutation bumps `version()` so stale traces can be detected.
class Model {
public:
    Model() = default;
    explicit Model(std::vector<LayerSpec> layers);

    /// He-normal weights, zero biases.
    static Model initialize(std::vector<LayerSpec> layers, std::uint64_t seed);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t num_layers() const noexcept { return layers_.size(); }

    const Tensor& weight(std::size_t l) const { return weights_.at(l); }
    const Tensor& bias(std::size_t l) const { return biases_.at(l); }
    const std::vector<Tensor>& weights() const noexcept { return weights_; }
    const std::vector<Tensor>& biases() const noexcept { return biases_; }

    Tensor& mutable_weight(std::size_t l);
    Tensor& mutable_bias(std::size_t l);

    std::size_t parameter_count() const noexcept;  // weights only
    std::vector<std::size_t> layer_offsets() const;  // size num_layers + 1

    std::vector<double> flat_weights() const;
    void set_flat_weights(std::span<const double> flat);

    std::uint64_t version() const noexcept { return version_; }

private:
    std::vector<LayerSpec> layers_;
    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;
    std::uint64_t version_ = 0;
};

struct Batch {
    Tensor inputs;            // [B, input_size]
    std::vector<int> labels;  // B entries in [0, classes)
};

/// Activations kept by the forward pass for backprop.
struct ForwardTrace {
    std::vector<Tensor> inputs;             // stored input activation of every layer; prunable
    std::vector<Tensor> pre_activations;    // z of every layer, dense; drives the ReLU mask
    std::vector<Tensor> effective_weights;  // θ used in the forward pass
    Tensor logits;
    std::size_t batch_size = 0;
    std::uint64_t model_version = 0;
};

struct ForwardResult {
    ForwardTrace trace;
    double loss = 0.0;
};

/// θ = reparam(ω), forward, mean cross-entropy.
ForwardResult forward(const Model& model, Reparam& reparam, const Batch& batch);

/// Logits only; no trace kept.
Tensor predict(const Model& model, Reparam& reparam, const Tensor& inputs);

/// Top-K prune each stored input activation at its layer's sparsity.
void prune_stored_activations(ForwardTrace& trace, std::span<const double> layer_sparsity);

/// Dense gradients with respect to the raw weights ω (and biases). The weight
/// gradient of layer l uses the stored (possibly pruned) input activation; the
/// error signal flowing to earlier layers uses only θ and the dense ReLU masks.
Gradients backward(const Model& model, const Reparam& reparam, const ForwardTrace& trace,
                   std::span<const int> labels);

/// ω -= eta * g, biases included.
void sgd_step(Model& model, const Gradients& grads, double eta);

/// η_t = η_start * exp((t / T) * ln(η_end / η_start)), indexed by round.
struct LrSchedule {
    double eta_start = 0.5;
    double eta_end = 0.01;
    int total_rounds = 1;

    void validate() const;
    friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

double lr_at(const LrSchedule& schedule, int t);

std::string to_string(LayerKind kind);
std::string to_string(Activation act);

}  // namespace sparsyfed
