#include "sparsyfed/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "sparsyfed/error.hpp"
#include "sparsyfed/rng.hpp"
#include "sparsyfed/sparsity.hpp"

namespace sparsyfed {

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, Activation act, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_features = in;
    s.out_features = out;
    s.activation = act;
    s.has_bias = bias;
    return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                            std::size_t height, std::size_t width, Activation act, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = kernel;
    s.in_height = height;
    s.in_width = width;
    s.activation = act;
    s.has_bias = bias;
    return s;
}

std::size_t LayerSpec::out_height() const { return in_height - kernel + 1; }
std::size_t LayerSpec::out_width() const { return in_width - kernel + 1; }

std::size_t LayerSpec::input_size() const {
    return kind == LayerKind::dense ? in_features : in_channels * in_height * in_width;
}

std::size_t LayerSpec::output_size() const {
    return kind == LayerKind::dense ? out_features : out_channels * out_height() * out_width();
}

std::vector<std::size_t> LayerSpec::weight_shape() const {
    if (kind == LayerKind::dense) return {out_features, in_features};
    return {out_channels, in_channels, kernel, kernel};
}

std::size_t LayerSpec::bias_size() const {
    return kind == LayerKind::dense ? out_features : out_channels;
}

void LayerSpec::validate() const {
    if (kind == LayerKind::dense) {
        if (in_features == 0 || out_features == 0) throw ConfigError("dense layer dims must be positive");
        return;
    }
    if (in_channels == 0 || out_channels == 0 || kernel == 0 || in_height == 0 || in_width == 0) {
        throw ConfigError("conv2d layer dims must be positive");
    }
    if (kernel > in_height || kernel > in_width) throw ConfigError("conv2d kernel larger than input");
}

void validate_architecture(const std::vector<LayerSpec>& layers) {
    if (layers.empty()) throw ConfigError("model needs at least one layer");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].validate();
        if (l > 0 && layers[l - 1].output_size() != layers[l].input_size()) {
            throw ConfigError("layer " + std::to_string(l) + " input size " +
                              std::to_string(layers[l].input_size()) + " does not match previous output " +
                              std::to_string(layers[l - 1].output_size()));
        }
    }
    if (layers.back().activation != Activation::none) {
        throw ConfigError("final layer must emit logits (activation none)");
    }
}

std::vector<LayerSpec> mlp_architecture(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                        std::size_t classes) {
    std::vector<LayerSpec> layers;
    std::size_t in = input_dim;
    for (auto h : hidden) {
        layers.push_back(LayerSpec::dense(in, h, Activation::relu));
        in = h;
    }
    layers.push_back(LayerSpec::dense(in, classes, Activation::none));
    validate_architecture(layers);
    return layers;
}

std::vector<LayerSpec> cnn_architecture(std::size_t channels, std::size_t height, std::size_t width,
                                        const std::vector<std::size_t>& conv_channels,
                                        std::size_t kernel, std::size_t classes) {
    std::vector<LayerSpec> layers;
    std::size_t c = channels, h = height, w = width;
    for (auto oc : conv_channels) {
        if (kernel > h || kernel > w) throw ConfigError("cnn: image too small for the conv stack");
        layers.push_back(LayerSpec::conv2d(c, oc, kernel, h, w, Activation::relu));
        c = oc;
        h = h - kernel + 1;
        w = w - kernel + 1;
    }
    layers.push_back(LayerSpec::dense(c * h * w, classes, Activation::none));
    validate_architecture(layers);
    return layers;
}

Model::Model(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    validate_architecture(layers_);
    for (const auto& spec : layers_) {
        weights_.emplace_back(spec.weight_shape());
        biases_.emplace_back(std::vector<std::size_t>{spec.bias_size()});
    }
}

Model Model::initialize(std::vector<LayerSpec> layers, std::uint64_t seed) {
    Model m(std::move(layers));
    Rng rng(seed);
    for (std::size_t l = 0; l < m.layers_.size(); ++l) {
        const auto& spec = m.layers_[l];
        const double fan_in = spec.kind == LayerKind::dense
                                  ? static_cast<double>(spec.in_features)
                                  : static_cast<double>(spec.in_channels * spec.kernel * spec.kernel);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (double& v : m.weights_[l].values()) v = dist(rng);
    }
    return m;
}

Tensor& Model::mutable_weight(std::size_t l) {
    ++version_;
    return weights_.at(l);
}

Tensor& Model::mutable_bias(std::size_t l) {
    ++version_;
    return biases_.at(l);
}

std::size_t Model::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& w : weights_) n += w.size();
    return n;
}

std::vector<std::size_t> Model::layer_offsets() const {
    std::vector<std::size_t> off{0};
    for (const auto& w : weights_) off.push_back(off.back() + w.size());
    return off;
}

std::vector<double> Model::flat_weights() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& w : weights_) flat.insert(flat.end(), w.raw().begin(), w.raw().end());
    return flat;
}

void Model::set_flat_weights(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw ConfigError("flat weight vector has wrong length");
    ++version_;
    std::size_t pos = 0;
    for (auto& w : weights_) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), w.size(), w.raw().begin());
        pos += w.size();
    }
}

namespace {

// z = θ · a (+ b) for one layer over a batch; `in` is [B, input_size].
std::vector<double> layer_forward(const LayerSpec& s, const Tensor& theta, const Tensor& bias,
                                  const std::vector<double>& in, std::size_t batch) {
    const std::size_t in_sz = s.input_size();
    const std::size_t out_sz = s.output_size();
    std::vector<double> out(batch * out_sz, 0.0);
    if (s.kind == LayerKind::dense) {
        for (std::size_t b = 0; b < batch; ++b) {
            const double* x = in.data() + b * in_sz;
            double* z = out.data() + b * out_sz;
            for (std::size_t o = 0; o < s.out_features; ++o) {
                const double* w = theta.raw().data() + o * in_sz;
                double acc = 0.0;
                for (std::size_t i = 0; i < in_sz; ++i) acc += w[i] * x[i];
                z[o] = acc + (s.has_bias ? bias[o] : 0.0);
            }
        }
        return out;
    }
    const std::size_t H = s.in_height, W = s.in_width, K = s.kernel;
    const std::size_t OH = s.out_height(), OW = s.out_width();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* x = in.data() + b * in_sz;
        double* z = out.data() + b * out_sz;
        for (std::size_t co = 0; co < s.out_channels; ++co) {
            for (std::size_t y = 0; y < OH; ++y) {
                for (std::size_t xo = 0; xo < OW; ++xo) {
                    double acc = s.has_bias ? bias[co] : 0.0;
                    for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
                        const double* wk = theta.raw().data() + ((co * s.in_channels + ci) * K) * K;
                        const double* xc = x + ci * H * W;
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                acc += wk[ky * K + kx] * xc[(y + ky) * W + xo + kx];
                            }
                        }
                    }
                    z[(co * OH + y) * OW + xo] = acc;
                }
            }
        }
    }
    return out;
}

// Accumulates dθ from dz and the stored input; optionally the input gradient.
void layer_backward(const LayerSpec& s, const Tensor& theta, const std::vector<double>& dz,
                    const std::vector<double>& in, std::size_t batch, Tensor& dtheta, Tensor& dbias,
                    std::vector<double>* din) {
    const std::size_t in_sz = s.input_size();
    const std::size_t out_sz = s.output_size();
    if (din) din->assign(batch * in_sz, 0.0);
    if (s.kind == LayerKind::dense) {
        for (std::size_t b = 0; b < batch; ++b) {
            const double* x = in.data() + b * in_sz;
            const double* g = dz.data() + b * out_sz;
            for (std::size_t o = 0; o < s.out_features; ++o) {
                const double go = g[o];
                if (s.has_bias) dbias[o] += go;
                double* dw = dtheta.raw().data() + o * in_sz;
                for (std::size_t i = 0; i < in_sz; ++i) dw[i] += go * x[i];
                if (din) {
                    const double* w = theta.raw().data() + o * in_sz;
                    double* dx = din->data() + b * in_sz;
                    for (std::size_t i = 0; i < in_sz; ++i) dx[i] += w[i] * go;
                }
            }
        }
        return;
    }
    const std::size_t H = s.in_height, W = s.in_width, K = s.kernel;
    const std::size_t OH = s.out_height(), OW = s.out_width();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* x = in.data() + b * in_sz;
        const double* g = dz.data() + b * out_sz;
        for (std::size_t co = 0; co < s.out_channels; ++co) {
            for (std::size_t y = 0; y < OH; ++y) {
                for (std::size_t xo = 0; xo < OW; ++xo) {
                    const double go = g[(co * OH + y) * OW + xo];
                    if (s.has_bias) dbias[co] += go;
                    for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
                        const std::size_t wbase = ((co * s.in_channels + ci) * K) * K;
                        const double* xc = x + ci * H * W;
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const std::size_t xi = (y + ky) * W + xo + kx;
                                dtheta[wbase + ky * K + kx] += go * xc[xi];
                                if (din) (*din)[b * in_sz + ci * H * W + xi] += theta[wbase + ky * K + kx] * go;
                            }
                        }
                    }
                }
            }
        }
    }
}

void check_batch(const Model& model, const Batch& batch) {
    const std::size_t B = batch.labels.size();
    if (B == 0) throw ConfigError("empty batch");
    const std::size_t in_sz = model.layers().front().input_size();
    if (batch.inputs.size() != B * in_sz) {
        throw ConfigError("batch input size " + std::to_string(batch.inputs.size()) + " != " +
                          std::to_string(B) + " x " + std::to_string(in_sz));
    }
    const auto classes = static_cast<int>(model.layers().back().output_size());
    for (int y : batch.labels) {
        if (y < 0 || y >= classes) throw ConfigError("label out of range: " + std::to_string(y));
    }
}

void relu_inplace(std::vector<double>& v) {
    for (double& x : v) x = x > 0.0 ? x : 0.0;
}

}  // namespace

ForwardResult forward(const Model& model, Reparam& reparam, const Batch& batch) {
    check_batch(model, batch);
    const std::size_t B = batch.labels.size();
    ForwardResult result;
    auto& tr = result.trace;
    tr.batch_size = B;
    tr.model_version = model.version();

    std::vector<double> act = batch.inputs.raw();
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
        const auto& spec = model.layers()[l];
        tr.effective_weights.push_back(reparam.apply(l, model.weight(l)));
        tr.inputs.emplace_back(std::vector<std::size_t>{B, spec.input_size()}, act);
        act = layer_forward(spec, tr.effective_weights.back(), model.bias(l), act, B);
        tr.pre_activations.emplace_back(std::vector<std::size_t>{B, spec.output_size()}, act);
        if (spec.activation == Activation::relu) relu_inplace(act);
    }
    const std::size_t C = model.layers().back().output_size();
    tr.logits = Tensor({B, C}, std::move(act));

    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = tr.logits.raw().data() + b * C;
        const double m = *std::max_element(z, z + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - m);
        loss += m + std::log(s) - z[batch.labels[b]];
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss");
    result.loss = loss;
    return result;
}

Tensor predict(const Model& model, Reparam& reparam, const Tensor& inputs) {
    const std::size_t in_sz = model.layers().front().input_size();
    if (inputs.size() % in_sz != 0) throw ConfigError("predict: input size mismatch");
    const std::size_t B = inputs.size() / in_sz;
    std::vector<double> act = inputs.raw();
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
        const auto& spec = model.layers()[l];
        act = layer_forward(spec, reparam.apply(l, model.weight(l)), model.bias(l), act, B);
        if (spec.activation == Activation::relu) relu_inplace(act);
    }
    return Tensor({B, model.layers().back().output_size()}, std::move(act));
}

void prune_stored_activations(ForwardTrace& trace, std::span<const double> layer_sparsity) {
    if (layer_sparsity.size() != trace.inputs.size()) {
        throw ConfigError("one activation sparsity per layer required");
    }
    for (std::size_t l = 0; l < trace.inputs.size(); ++l) {
        if (layer_sparsity[l] > 0.0) trace.inputs[l] = topk_per_layer(trace.inputs[l], layer_sparsity[l]);
    }
}

Gradients backward(const Model& model, const Reparam& reparam, const ForwardTrace& trace,
                   std::span<const int> labels) {
    if (trace.model_version != model.version() || trace.inputs.size() != model.num_layers()) {
        throw UsageError("stale forward trace: model changed since forward");
    }
    const std::size_t B = trace.batch_size;
    if (labels.size() != B) throw ConfigError("label count does not match trace batch");
    const std::size_t C = model.layers().back().output_size();

    // d loss / d logits for mean softmax cross-entropy.
    std::vector<double> grad(B * C);
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = trace.logits.raw().data() + b * C;
        const double m = *std::max_element(z, z + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - m);
        for (std::size_t c = 0; c < C; ++c) {
            double p = std::exp(z[c] - m) / s;
            if (static_cast<int>(c) == labels[b]) p -= 1.0;
            grad[b * C + c] = p / static_cast<double>(B);
        }
    }

    Gradients g;
    g.weights.resize(model.num_layers());
    g.biases.resize(model.num_layers());
    for (std::size_t li = model.num_layers(); li-- > 0;) {
        const auto& spec = model.layers()[li];
        if (spec.activation == Activation::relu) {
            const auto& z = trace.pre_activations[li].raw();
            for (std::size_t i = 0; i < grad.size(); ++i) {
                if (!(z[i] > 0.0)) grad[i] = 0.0;
            }
        }
        Tensor dtheta(spec.weight_shape());
        Tensor dbias(std::vector<std::size_t>{spec.bias_size()});
        std::vector<double> din;
        layer_backward(spec, trace.effective_weights[li], grad, trace.inputs[li].raw(), B, dtheta, dbias,
                       li > 0 ? &din : nullptr);
        const Tensor factor = reparam.grad_factor(li, model.weight(li));
        for (std::size_t i = 0; i < dtheta.size(); ++i) dtheta[i] *= factor[i];
        g.weights[li] = std::move(dtheta);
        g.biases[li] = std::move(dbias);
        grad = std::move(din);
    }
    return g;
}

void sgd_step(Model& model, const Gradients& grads, double eta) {
    if (grads.weights.size() != model.num_layers() || grads.biases.size() != model.num_layers()) {
        throw ConfigError("gradient layer count does not match model");
    }
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
        if (grads.weights[l].size() != model.weight(l).size() ||
            grads.biases[l].size() != model.bias(l).size()) {
            throw ConfigError("gradient shape does not match layer " + std::to_string(l));
        }
        if (eta == 0.0) continue;
        auto& w = model.mutable_weight(l);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * grads.weights[l][i];
        auto& b = model.mutable_bias(l);
        for (std::size_t i = 0; i < b.size(); ++i) b[i] -= eta * grads.biases[l][i];
    }
}

void LrSchedule::validate() const {
    if (!(eta_start > 0.0) || !(eta_end > 0.0)) throw ConfigError("learning rates must be positive");
    if (total_rounds <= 0) throw ConfigError("lr schedule needs total_rounds > 0");
}

double lr_at(const LrSchedule& schedule, int t) {
    schedule.validate();
    if (t < 0 || t > schedule.total_rounds) {
        throw UsageError("lr_at: round " + std::to_string(t) + " outside [0, " +
                         std::to_string(schedule.total_rounds) + "]");
    }
    const double frac = static_cast<double>(t) / static_cast<double>(schedule.total_rounds);
    return schedule.eta_start * std::exp(frac * std::log(schedule.eta_end / schedule.eta_start));
}

std::string to_string(LayerKind kind) { return kind == LayerKind::dense ? "dense" : "conv2d"; }
std::string to_string(Activation act) { return act == Activation::relu ? "relu" : "none"; }

}  // namespace sparsyfed
