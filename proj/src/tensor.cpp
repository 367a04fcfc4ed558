#include "sparsyfed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sparsyfed/error.hpp"

namespace sparsyfed {

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
    for (auto d : shape) {
        if (d == 0) throw ConfigError("tensor dimensions must be positive");
    }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape product " +
                          std::to_string(shape_product(shape_)));
    }
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::size_t Tensor::count_nonzero() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(data_.begin(), data_.end(), [](double v) { return v != 0.0; }));
}

}  // namespace sparsyfed
