#include "sparsyfed/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sparsyfed/error.hpp"
#include "sparsyfed/nn.hpp"

namespace sparsyfed {

std::size_t keep_count(std::size_t n, double s) {
    if (!(s >= 0.0 && s < 1.0)) {
        throw ConfigError("target sparsity must lie in [0, 1), got " + std::to_string(s));
    }
    if (n == 0) return 0;
    const double exact = (1.0 - s) * static_cast<double>(n);
    // Absorb representation error such as (1 - 0.95) * 1000 = 50.000000000000043.
    const double k = std::ceil(exact - 1e-9 * std::max(1.0, exact));
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 0.0)), 1, n);
}

std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    auto before = [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(values[a]), mb = std::abs(values[b]);
        return ma > mb || (ma == mb && a < b);
    };
    if (k < idx.size()) {
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> topk_global(std::span<const double> values, double s) {
    const std::size_t k = keep_count(values.size(), s);
    std::vector<double> out(values.size(), 0.0);
    if (k == values.size()) {
        std::copy(values.begin(), values.end(), out.begin());
        return out;
    }
    for (auto i : topk_indices(values, k)) out[i] = values[i];
    return out;
}

Tensor topk_per_layer(const Tensor& t, double s) {
    return Tensor(t.shape(), topk_global(t.values(), s));
}

void prune_model_global(Model& model, double s) {
    model.set_flat_weights(topk_global(model.flat_weights(), s));
}

double vector_sparsity(std::span<const double> values) {
    if (values.empty()) return 0.0;
    const auto zeros = std::count(values.begin(), values.end(), 0.0);
    return static_cast<double>(zeros) / static_cast<double>(values.size());
}

double layer_sparsity(const Tensor& t) { return vector_sparsity(t.values()); }

SparseMask::SparseMask(std::vector<std::uint8_t> bits, std::vector<std::size_t> layer_offsets)
    : bits_(std::move(bits)), offsets_(std::move(layer_offsets)) {
    if (offsets_.empty()) offsets_ = {0, bits_.size()};
    if (offsets_.front() != 0 || offsets_.back() != bits_.size() ||
        !std::is_sorted(offsets_.begin(), offsets_.end())) {
        throw ConfigError("mask layer offsets do not cover the mask");
    }
}

SparseMask SparseMask::of_values(std::span<const double> values) {
    std::vector<std::uint8_t> bits(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) bits[i] = values[i] != 0.0 ? 1 : 0;
    return SparseMask(std::move(bits), {0, values.size()});
}

std::size_t SparseMask::popcount() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

double SparseMask::density() const noexcept {
    if (bits_.empty()) return 0.0;
    return static_cast<double>(popcount()) / static_cast<double>(bits_.size());
}

SparseMask mask_of(const Model& model) {
    auto flat = model.flat_weights();
    std::vector<std::uint8_t> bits(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) bits[i] = flat[i] != 0.0 ? 1 : 0;
    return SparseMask(std::move(bits), model.layer_offsets());
}

void apply_mask(Model& model, const SparseMask& mask) {
    auto flat = model.flat_weights();
    if (flat.size() != mask.size()) throw ConfigError("mask length does not match model");
    for (std::size_t i = 0; i < flat.size(); ++i) {
        if (!mask.bits()[i]) flat[i] = 0.0;
    }
    model.set_flat_weights(flat);
}

double mask_iou(const SparseMask& a, const SparseMask& b) {
    if (a.size() != b.size()) throw ConfigError("mask_iou: masks differ in length");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.bits()[i], y = b.bits()[i];
        inter += (x && y);
        uni += (x || y);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t regrowth_count(const SparseMask& before, const SparseMask& after) {
    if (before.size() != after.size()) throw ConfigError("regrowth_count: masks differ in length");
    std::size_t n = 0;
    for (std::size_t i = 0; i < before.size(); ++i) n += (!before.bits()[i] && after.bits()[i]);
    return n;
}

SparsityReport sparsity_report(const Model& model) {
    SparsityReport r;
    std::size_t zeros = 0, total = 0;
    for (const auto& w : model.weights()) {
        const auto z = static_cast<std::size_t>(std::count(w.raw().begin(), w.raw().end(), 0.0));
        r.per_layer_sparsity.push_back(static_cast<double>(z) / static_cast<double>(w.size()));
        zeros += z;
        total += w.size();
    }
    r.global_sparsity = total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
    return r;
}

}  // namespace sparsyfed
