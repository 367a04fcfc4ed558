#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sparsyfed/tensor.hpp"

namespace sparsyfed {

// Point-wise weight re-parametrizations θ = f(ω) used in the forward pass.
// Every variant maps 0 to 0 and preserves sign, so zero weights stay zero in θ.

/// sign(w) * |w|^beta. beta >= 1.
Tensor apply_powerprop(const Tensor& w, double beta);

/// dθ/dω = beta * |w|^(beta-1). For beta == 1 this is exactly 1 everywhere.
Tensor powerprop_grad_factor(const Tensor& w, double beta);

/// Mean of 1 + |w_i| / max_j |w_j| over the layer. All-zero layer yields 1.
double spectral_exponent_of(const Tensor& w);

/// sign(w) * |w|^e with e taken from `cache`, computing and storing it on the
/// first call.
Tensor apply_spectral_exponent(const Tensor& w, std::optional<double>& cache);

/// w * |w| / max|w|. All-zero layer is returned unchanged.
Tensor apply_spectral_rescale(const Tensor& w);

/// 2|w| / max|w| with the max held constant; all-ones for an all-zero layer.
Tensor spectral_rescale_grad_factor(const Tensor& w);

enum class ReparamKind { identity, powerprop, spectral_exponent, spectral_rescale };

std::string to_string(ReparamKind kind);
ReparamKind reparam_kind_from_string(const std::string& name);

/// Value description of a re-parametrization, as carried in configs.
struct ReparamSpec {
    ReparamKind kind = ReparamKind::identity;
    double beta = 1.0;

    friend bool operator==(const ReparamSpec&, const ReparamSpec&) = default;
};

/// A re-parametrization bound to one local training session. The spectral
/// exponent variant caches one exponent per layer on first use; the cache is
/// never recomputed for the lifetime of the object.
class Reparam {
public:
    Reparam() = default;
    explicit Reparam(ReparamSpec spec);

    static Reparam identity() { return Reparam{}; }
    static Reparam powerprop(double beta) { return Reparam({ReparamKind::powerprop, beta}); }

    const ReparamSpec& spec() const noexcept { return spec_; }
    ReparamKind kind() const noexcept { return spec_.kind; }

    Tensor apply(std::size_t layer, const Tensor& w);
    Tensor grad_factor(std::size_t layer, const Tensor& w) const;

    /// Cached exponent for `layer`, if the spectral exponent variant has seen it.
    std::optional<double> cached_exponent(std::size_t layer) const;

private:
    ReparamSpec spec_;
    std::vector<std::optional<double>> exponents_;
};

}  // namespace sparsyfed
