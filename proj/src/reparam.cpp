#include "sparsyfed/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "sparsyfed/error.hpp"

namespace sparsyfed {

namespace {

double max_abs(const Tensor& w) {
    double m = 0.0;
    for (double v : w.values()) m = std::max(m, std::abs(v));
    return m;
}

double signed_power(double v, double e) {
    if (v == 0.0) return 0.0;
    return std::copysign(std::pow(std::abs(v), e), v);
}

}  // namespace

Tensor apply_powerprop(const Tensor& w, double beta) {
    if (!(beta >= 1.0)) throw ConfigError("powerprop beta must be >= 1");
    Tensor out = w;
    for (double& v : out.values()) v = signed_power(v, beta);
    return out;
}

Tensor powerprop_grad_factor(const Tensor& w, double beta) {
    if (!(beta >= 1.0)) throw ConfigError("powerprop beta must be >= 1");
    Tensor out = w;
    for (double& v : out.values()) {
        // pow(0, 0) == 1 keeps beta == 1 an exact identity, zeros included.
        v = beta * std::pow(std::abs(v), beta - 1.0);
    }
    return out;
}

double spectral_exponent_of(const Tensor& w) {
    const double m = max_abs(w);
    if (m == 0.0) return 1.0;
    double sum = 0.0;
    for (double v : w.values()) sum += 1.0 + std::abs(v) / m;
    return sum / static_cast<double>(w.size());
}

Tensor apply_spectral_exponent(const Tensor& w, std::optional<double>& cache) {
    if (!cache) {
        if (max_abs(w) == 0.0) {
            std::clog << "warning: spectral exponent on an all-zero layer, using 1\n";
        }
        cache = spectral_exponent_of(w);
    }
    Tensor out = w;
    for (double& v : out.values()) v = signed_power(v, *cache);
    return out;
}

Tensor apply_spectral_rescale(const Tensor& w) {
    const double sigma = max_abs(w);
    if (sigma == 0.0) return w;
    Tensor out = w;
    for (double& v : out.values()) v = v * std::abs(v) / sigma;
    return out;
}

Tensor spectral_rescale_grad_factor(const Tensor& w) {
    const double sigma = max_abs(w);
    Tensor out(w.shape(), 1.0);
    if (sigma == 0.0) return out;
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = 2.0 * std::abs(w[i]) / sigma;
    return out;
}

std::string to_string(ReparamKind kind) {
    switch (kind) {
        case ReparamKind::identity: return "identity";
        case ReparamKind::powerprop: return "powerprop";
        case ReparamKind::spectral_exponent: return "spectral_exponent";
        case ReparamKind::spectral_rescale: return "spectral_rescale";
    }
    return "unknown";
}

ReparamKind reparam_kind_from_string(const std::string& name) {
    for (auto k : {ReparamKind::identity, ReparamKind::powerprop, ReparamKind::spectral_exponent,
                   ReparamKind::spectral_rescale}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown reparam kind '" + name + "'");
}

Reparam::Reparam(ReparamSpec spec) : spec_(spec) {
    if (spec_.kind == ReparamKind::powerprop && !(spec_.beta >= 1.0)) {
        throw ConfigError("powerprop beta must be >= 1");
    }
}

Tensor Reparam::apply(std::size_t layer, const Tensor& w) {
    switch (spec_.kind) {
        case ReparamKind::identity: return w;
        case ReparamKind::powerprop: return apply_powerprop(w, spec_.beta);
        case ReparamKind::spectral_exponent:
            if (exponents_.size() <= layer) exponents_.resize(layer + 1);
            return apply_spectral_exponent(w, exponents_[layer]);
        case ReparamKind::spectral_rescale: return apply_spectral_rescale(w);
    }
    return w;
}

Tensor Reparam::grad_factor(std::size_t layer, const Tensor& w) const {
    switch (spec_.kind) {
        case ReparamKind::identity: return Tensor(w.shape(), 1.0);
        case ReparamKind::powerprop: return powerprop_grad_factor(w, spec_.beta);
        case ReparamKind::spectral_exponent: {
            auto e = cached_exponent(layer);
            if (!e) throw UsageError("spectral exponent gradient requested before forward");
            return powerprop_grad_factor(w, *e);
        }
        case ReparamKind::spectral_rescale: return spectral_rescale_grad_factor(w);
    }
    return Tensor(w.shape(), 1.0);
}

std::optional<double> Reparam::cached_exponent(std::size_t layer) const {
    if (layer >= exponents_.size()) return std::nullopt;
    return exponents_[layer];
}

}  // namespace sparsyfed
