#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sparsyfed/tensor.hpp"

namespace sparsyfed {

class Model;

/// Number of survivors for target sparsity s over n entries: ceil((1 - s) * n),
/// never less than one when n > 0. Throws ConfigError unless 0 <= s < 1.
std::size_t keep_count(std::size_t n, double s);

/// Indices of the k largest |values|, ascending. Ties keep the lower index.
std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k);

/// Unstructured Top-K over a flat vector: keep_count(n, s) entries survive, the
/// rest become exact 0.0.
std::vector<double> topk_global(std::span<const double> values, double s);

/// Same contract as topk_global, over one tensor.
Tensor topk_per_layer(const Tensor& t, double s);

/// Global Top-K across every weight tensor of the model. Biases untouched.
void prune_model_global(Model& model, double s);

/// Fraction of entries that are exactly 0.0.
double layer_sparsity(const Tensor& t);
double vector_sparsity(std::span<const double> values);

/// Binary support indicator aligned with Model's flattened weight order.
class SparseMask {
public:
    SparseMask() = default;
    SparseMask(std::vector<std::uint8_t> bits, std::vector<std::size_t> layer_offsets);

    /// Mask of nonzero entries, one layer spanning everything.
    static SparseMask of_values(std::span<const double> values);

    std::size_t size() const noexcept { return bits_.size(); }
    bool test(std::size_t i) const { return bits_.at(i) != 0; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }
    const std::vector<std::size_t>& layer_offsets() const noexcept { return offsets_; }

    std::size_t popcount() const noexcept;
    double density() const noexcept;

    friend bool operator==(const SparseMask&, const SparseMask&) = default;

private:
    std::vector<std::uint8_t> bits_;
    std::vector<std::size_t> offsets_;
};

SparseMask mask_of(const Model& model);

/// Zero every weight whose mask bit is 0.
void apply_mask(Model& model, const SparseMask& mask);

/// |a ∧ b| / |a ∨ b|; 1.0 when both are empty.
double mask_iou(const SparseMask& a, const SparseMask& b);

/// Positions that are 0 in `before` and 1 in `after`.
std::size_t regrowth_count(const SparseMask& before, const SparseMask& after);

struct SparsityReport {
    double global_sparsity = 0.0;
    std::vector<double> per_layer_sparsity;
};

SparsityReport sparsity_report(const Model& model);

}  // namespace sparsyfed
