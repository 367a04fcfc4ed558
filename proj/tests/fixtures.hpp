#pragma once

#include "sparsyfed/data.hpp"
#include "sparsyfed/federation.hpp"
#include "sparsyfed/nn.hpp"
#include "sparsyfed/rng.hpp"

namespace fixtures {

inline sparsyfed::FederatedData federated(const sparsyfed::SyntheticSpec& spec, std::size_t clients, double alpha,
                                          std::uint64_t seed) {
    auto [train, test] = sparsyfed::make_synthetic(spec, seed);
    auto partition = sparsyfed::lda_partition(train.labels, spec.classes, clients, alpha, seed);
    return {std::move(train), std::move(test), std::move(partition)};
}

inline sparsyfed::Model model_for(const sparsyfed::SyntheticSpec& spec, const std::vector<std::size_t>& hidden,
                                  std::uint64_t seed) {
    return sparsyfed::Model::initialize(
        sparsyfed::mlp_architecture(spec.dim, hidden, static_cast<std::size_t>(spec.classes)),
        sparsyfed::derive_seed({seed, 0x1417}));
}

}  // namespace fixtures
