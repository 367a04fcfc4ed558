#include "sparsyfed/federation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>
#include <thread>

#include "sparsyfed/error.hpp"
#include "sparsyfed/rng.hpp"

namespace sparsyfed {

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::sparsyfed: return "sparsyfed";
        case Algorithm::topk: return "topk";
        case Algorithm::zerofl: return "zerofl";
        case Algorithm::flash: return "flash";
        case Algorithm::naive_powerprop: return "naive_powerprop";
        case Algorithm::dense: return "dense";
    }
    return "unknown";
}

Algorithm algorithm_from_string(const std::string& name) {
    for (auto a : {Algorithm::sparsyfed, Algorithm::topk, Algorithm::zerofl, Algorithm::flash,
                   Algorithm::naive_powerprop, Algorithm::dense}) {
        if (to_string(a) == name) return a;
    }
    throw ConfigError("unknown algorithm '" + name + "'");
}

std::string to_string(Weighting w) { return w == Weighting::uniform ? "uniform" : "samples"; }

Weighting weighting_from_string(const std::string& name) {
    if (name == "uniform") return Weighting::uniform;
    if (name == "samples") return Weighting::samples;
    throw ConfigError("unknown weighting '" + name + "'");
}

void FedConfig::validate() const {
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (clients_total == 0) throw ConfigError("clients_total must be >= 1");
    if (clients_per_round == 0 || clients_per_round > clients_total) {
        throw ConfigError("clients_per_round must lie in [1, clients_total]");
    }
    if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (groups.empty()) throw ConfigError("at least one sparsity group is required");
    std::size_t covered = 0;
    for (const auto& g : groups) {
        if (g.clients == 0) throw ConfigError("sparsity group sizes must be positive");
        if (!(g.target >= 0.0 && g.target < 1.0)) {
            throw ConfigError("target sparsity must lie in [0, 1), got " + std::to_string(g.target));
        }
        covered += g.clients;
    }
    if (covered != clients_total) throw ConfigError("sparsity group sizes must sum to clients_total");
    if ((algorithm == Algorithm::flash || algorithm == Algorithm::naive_powerprop) && groups.size() != 1) {
        throw ConfigError(to_string(algorithm) + " supports a single sparsity group only");
    }
    if (reparam.kind == ReparamKind::powerprop && !(reparam.beta >= 1.0)) {
        throw ConfigError("powerprop beta must be >= 1");
    }
    if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw ConfigError("learning rates must be positive");
    if (mask_every < 1) throw ConfigError("mask_every must be >= 1");
    if (client_threads == 0) throw ConfigError("client_threads must be >= 1");
}

double FedConfig::target_for(std::size_t client_id) const {
    std::size_t end = 0;
    for (const auto& g : groups) {
        end += g.clients;
        if (client_id < end) return g.target;
    }
    throw UsageError("client id " + std::to_string(client_id) + " outside every sparsity group");
}

void FedConfig::set_uniform_target(double target) { groups = {{clients_total, target}}; }

ReparamSpec FedConfig::effective_reparam() const {
    if (algorithm == Algorithm::sparsyfed || algorithm == Algorithm::naive_powerprop) return reparam;
    return {};
}

namespace {

void mask_gradients(Gradients& g, const SparseMask& mask) {
    const auto& off = mask.layer_offsets();
    if (off.size() != g.weights.size() + 1) throw ConfigError("gradient mask layer count mismatch");
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        for (std::size_t i = 0; i < g.weights[l].size(); ++i) {
            if (!mask.bits()[off[l] + i]) g.weights[l][i] = 0.0;
        }
    }
}

Model swat_copy(const Model& model, double s) {
    Model copy = model;
    for (std::size_t l = 0; l < copy.num_layers(); ++l) {
        copy.mutable_weight(l) = topk_per_layer(model.weight(l), s);
    }
    return copy;
}

}  // namespace

Model train_locally(Model start, const LabeledDataset& data, std::span<const std::size_t> indices,
                    const LocalTrainOptions& options, const StepObserver& observer) {
    Model model = std::move(start);
    Reparam reparam(options.reparam);
    std::vector<double> act_sparsity(model.num_layers(), options.uniform_sparsity);
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        const auto batches =
            make_batches(indices, options.batch_size, derive_seed({options.seed, static_cast<std::uint64_t>(epoch)}));
        for (std::size_t step = 0; step < batches.size(); ++step) {
            const Batch batch = gather_batch(data, batches[step]);
            const Model* fwd = &model;
            Model working;
            if (options.swat_weights) {
                working = swat_copy(model, options.uniform_sparsity);
                fwd = &working;
            }
            auto [trace, loss] = forward(*fwd, reparam, batch);
            switch (options.activation) {
                case ActivationPruning::off: break;
                case ActivationPruning::weight_sparsity:
                    for (std::size_t l = 0; l < trace.effective_weights.size(); ++l) {
                        act_sparsity[l] = layer_sparsity(trace.effective_weights[l]);
                    }
                    prune_stored_activations(trace, act_sparsity);
                    break;
                case ActivationPruning::uniform: prune_stored_activations(trace, act_sparsity); break;
            }
            Gradients grads = backward(*fwd, reparam, trace, batch.labels);
            if (options.gradient_mask) mask_gradients(grads, *options.gradient_mask);
            sgd_step(model, grads, options.eta);
            if (observer) observer({epoch, step, loss, *fwd, trace, model});
        }
    }
    return model;
}

namespace {

ClientUpdate finish_update(const Model& global, const Model& local, const ClientTask& task, bool prune) {
    ClientUpdate u;
    u.client_id = task.client_id;
    u.target = task.target;
    u.num_samples = task.indices.size();
    u.mask_before = mask_of(global);
    u.mask_after = mask_of(local);
    u.regrowth = regrowth_count(u.mask_before, u.mask_after);
    u.weights = local.flat_weights();
    if (prune) u.weights = topk_global(u.weights, task.target);
    const auto base = global.flat_weights();
    u.pseudo_gradient.resize(u.weights.size());
    for (std::size_t i = 0; i < base.size(); ++i) u.pseudo_gradient[i] = u.weights[i] - base[i];
    u.nnz = static_cast<std::size_t>(std::count_if(u.weights.begin(), u.weights.end(),
                                                   [](double v) { return v != 0.0; }));
    u.biases = local.biases();
    return u;
}

LocalTrainOptions base_options(const ClientTask& task, const FedConfig& cfg) {
    LocalTrainOptions o;
    o.epochs = cfg.local_epochs;
    o.batch_size = cfg.batch_size;
    o.eta = task.eta;
    o.seed = task.seed;
    return o;
}

}  // namespace

ClientUpdate client_sparsyfed(const Model& global, const LabeledDataset& data, const ClientTask& task,
                              const FedConfig& cfg, const StepObserver& observer) {
    auto o = base_options(task, cfg);
    o.reparam = cfg.reparam;
    o.activation = cfg.activation_pruning ? ActivationPruning::weight_sparsity : ActivationPruning::off;
    const Model local = train_locally(global, data, task.indices, o, observer);
    return finish_update(global, local, task, true);
}

ClientUpdate client_topk(const Model& global, const LabeledDataset& data, const ClientTask& task,
                         const FedConfig& cfg, const StepObserver& observer) {
    const Model local = train_locally(global, data, task.indices, base_options(task, cfg), observer);
    return finish_update(global, local, task, true);
}

ClientUpdate client_zerofl(const Model& global, const LabeledDataset& data, const ClientTask& task,
                           const FedConfig& cfg, const StepObserver& observer) {
    auto o = base_options(task, cfg);
    o.swat_weights = true;
    o.activation = ActivationPruning::uniform;
    o.uniform_sparsity = task.target;
    const Model local = train_locally(global, data, task.indices, o, observer);
    return finish_update(global, local, task, true);
}

ClientUpdate client_flash(const Model& global, const LabeledDataset& data, const ClientTask& task,
                          const FedConfig& cfg, const SparseMask* fixed_mask, const StepObserver& observer) {
    auto o = base_options(task, cfg);
    o.gradient_mask = fixed_mask;
    const Model local = train_locally(global, data, task.indices, o, observer);
    return finish_update(global, local, task, false);
}

ClientUpdate client_naive_powerprop(const Model& global, const LabeledDataset& data, const ClientTask& task,
                                    const FedConfig& cfg, const StepObserver& observer) {
    auto o = base_options(task, cfg);
    o.reparam = cfg.reparam;
    const Model local = train_locally(global, data, task.indices, o, observer);
    return finish_update(global, local, task, false);
}

ClientUpdate client_dense(const Model& global, const LabeledDataset& data, const ClientTask& task,
                          const FedConfig& cfg, const StepObserver& observer) {
    const Model local = train_locally(global, data, task.indices, base_options(task, cfg), observer);
    return finish_update(global, local, task, false);
}

std::vector<double> aggregate_fedavg(std::span<const double> base, const std::vector<std::vector<double>>& updates,
                                     std::span<const double> weights) {
    std::vector<double> out(base.begin(), base.end());
    if (updates.empty()) return out;
    if (!weights.empty() && weights.size() != updates.size()) {
        throw ConfigError("aggregate_fedavg: one weight per update required");
    }
    std::vector<double> sum(base.size(), 0.0);
    for (std::size_t i = 0; i < updates.size(); ++i) {
        if (updates[i].size() != base.size()) throw ConfigError("aggregate_fedavg: update length mismatch");
        const double w = weights.empty() ? 1.0 : weights[i];
        for (std::size_t j = 0; j < base.size(); ++j) sum[j] += w * updates[i][j];
    }
    const auto n = static_cast<double>(updates.size());
    for (std::size_t j = 0; j < base.size(); ++j) out[j] += weights.empty() ? sum[j] / n : sum[j];
    return out;
}

std::vector<double> aggregate_nonzero_avg(std::span<const double> base,
                                          const std::vector<std::vector<double>>& updates) {
    std::vector<double> out(base.begin(), base.end());
    std::vector<double> sum(base.size(), 0.0);
    std::vector<std::size_t> count(base.size(), 0);
    for (const auto& u : updates) {
        if (u.size() != base.size()) throw ConfigError("aggregate_nonzero_avg: update length mismatch");
        for (std::size_t j = 0; j < base.size(); ++j) {
            if (u[j] != 0.0) {
                sum[j] += u[j];
                ++count[j];
            }
        }
    }
    for (std::size_t j = 0; j < base.size(); ++j) {
        out[j] += sum[j] / static_cast<double>(std::max<std::size_t>(1, count[j]));
    }
    return out;
}

SparseMask flash_sensitivity_mask(const Model& aggregated,
                                  const std::vector<std::vector<double>>& client_layer_sparsities,
                                  double target) {
    const std::size_t L = aggregated.num_layers();
    if (client_layer_sparsities.empty()) throw ConfigError("flash: no client sparsities");
    std::vector<double> density(L, 0.0);  // 1 - d_l
    for (const auto& c : client_layer_sparsities) {
        if (c.size() != L) throw ConfigError("flash: one sparsity per layer required");
        for (std::size_t l = 0; l < L; ++l) density[l] += c[l];
    }
    std::vector<double> sizes(L);
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        density[l] = 1.0 - density[l] / static_cast<double>(client_layer_sparsities.size());
        sizes[l] = static_cast<double>(aggregated.weight(l).size());
        total += sizes[l];
    }
    const std::size_t budget = keep_count(aggregated.parameter_count(), target);
    const double want = static_cast<double>(budget);
    auto kept = [&](double r) {
        double k = 0.0;
        for (std::size_t l = 0; l < L; ++l) k += std::clamp(r * density[l], 0.0, 1.0) * sizes[l];
        return k;
    };
    double ceiling = 0.0;
    for (std::size_t l = 0; l < L; ++l) ceiling += density[l] > 0.0 ? sizes[l] : 0.0;
    if (ceiling < want) {
        throw ConfigError("flash: keep budget " + std::to_string(budget) +
                          " unreachable, layers with nonzero density hold only " + std::to_string(ceiling));
    }
    const double tol = 1e-9 * total;
    double lo = 0.0, hi = 1.0;
    while (kept(hi) < want - tol) hi *= 2.0;
    double r = hi;
    for (int it = 0; it < 200 && std::abs(kept(r) - want) > tol; ++it) {
        r = 0.5 * (lo + hi);
        (kept(r) < want ? lo : hi) = r;
    }

    // Integer per-layer counts summing exactly to the budget (largest remainder).
    std::vector<std::size_t> counts(L);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t l = 0; l < L; ++l) {
        const double exact = std::clamp(r * density[l], 0.0, 1.0) * sizes[l];
        counts[l] = std::min(static_cast<std::size_t>(std::floor(exact)), aggregated.weight(l).size());
        assigned += counts[l];
        remainders.emplace_back(exact - std::floor(exact), l);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t pass = 0; assigned < budget && pass < 2; ++pass) {
        for (const auto& [rem, l] : remainders) {
            if (assigned >= budget) break;
            if (counts[l] < aggregated.weight(l).size() && (pass == 1 || rem > 0.0)) {
                ++counts[l];
                ++assigned;
            }
        }
    }
    while (assigned > budget) {
        for (std::size_t l = L; l-- > 0 && assigned > budget;) {
            if (counts[l] > 0) {
                --counts[l];
                --assigned;
            }
        }
    }

    std::vector<std::uint8_t> bits(aggregated.parameter_count(), 0);
    const auto off = aggregated.layer_offsets();
    for (std::size_t l = 0; l < L; ++l) {
        for (auto i : topk_indices(aggregated.weight(l).values(), counts[l])) bits[off[l] + i] = 1;
    }
    return SparseMask(std::move(bits), off);
}

std::vector<std::size_t> sample_clients(std::size_t population, std::size_t count, int round,
                                        std::uint64_t seed) {
    if (count > population) throw ConfigError("cannot sample more clients than the population holds");
    std::vector<std::size_t> ids(population);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(round)}));
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, population - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

std::vector<double> layer_sparsities_of(std::span<const double> flat, const std::vector<std::size_t>& offsets) {
    std::vector<double> out;
    for (std::size_t l = 0; l + 1 < offsets.size(); ++l) {
        out.push_back(vector_sparsity(flat.subspan(offsets[l], offsets[l + 1] - offsets[l])));
    }
    return out;
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    const std::size_t workers = std::min(threads, n);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

FederationResult run_federation(const FedConfig& cfg, const FederatedData& data, const Model& initial,
                                const UpdateObserver& on_update) {
    cfg.validate();
    if (data.partition.num_clients() != cfg.clients_total) {
        throw ConfigError("partition has " + std::to_string(data.partition.num_clients()) +
                          " clients, config expects " + std::to_string(cfg.clients_total));
    }
    FederationResult result;
    result.final_model = initial;
    Model& global = result.final_model;
    const auto initial_flat = initial.flat_weights();
    const auto offsets = initial.layer_offsets();
    const ReparamSpec eval_reparam = cfg.effective_reparam();
    const LrSchedule schedule{cfg.lr_start, cfg.lr_end, std::max(cfg.rounds, 1)};
    std::size_t cumulative = 0;

    for (int t = 0; t < cfg.rounds; ++t) {
        const double eta = lr_at(schedule, t);
        const auto sampled = sample_clients(cfg.clients_total, cfg.clients_per_round, t, cfg.sampling_seed);
        std::vector<ClientUpdate> updates(sampled.size());
        const SparseMask* fixed = result.flash_mask ? &*result.flash_mask : nullptr;

        parallel_for(sampled.size(), cfg.client_threads, [&](std::size_t k) {
            const std::size_t id = sampled[k];
            ClientTask task;
            task.client_id = id;
            task.round = t;
            task.eta = eta;
            task.target = cfg.target_for(id);
            task.seed = derive_seed({cfg.global_seed, cfg.sampling_seed, static_cast<std::uint64_t>(t), id});
            task.indices = data.partition.clients[id];
            try {
                switch (cfg.algorithm) {
                    case Algorithm::sparsyfed: updates[k] = client_sparsyfed(global, data.train, task, cfg); break;
                    case Algorithm::topk: updates[k] = client_topk(global, data.train, task, cfg); break;
                    case Algorithm::zerofl: updates[k] = client_zerofl(global, data.train, task, cfg); break;
                    case Algorithm::flash: updates[k] = client_flash(global, data.train, task, cfg, fixed); break;
                    case Algorithm::naive_powerprop:
                        updates[k] = client_naive_powerprop(global, data.train, task, cfg);
                        break;
                    case Algorithm::dense: updates[k] = client_dense(global, data.train, task, cfg); break;
                }
            } catch (const NumericError& e) {
                throw NumericError("round " + std::to_string(t) + ", client " + std::to_string(id) + ": " +
                                   e.what());
            }
        });
        if (on_update) {
            for (const auto& u : updates) on_update(t, u);
        }

        const auto before = global.flat_weights();
        std::vector<std::vector<double>> payloads, deltas;
        std::vector<double> weights;
        std::size_t samples = 0;
        for (const auto& u : updates) samples += u.num_samples;
        for (const auto& u : updates) {
            payloads.push_back(u.weights);
            deltas.push_back(u.pseudo_gradient);
            weights.push_back(static_cast<double>(u.num_samples) / static_cast<double>(samples));
        }
        const std::span<const double> agg_weights =
            cfg.weighting == Weighting::samples ? std::span<const double>(weights) : std::span<const double>{};

        std::vector<double> next;
        if (cfg.algorithm == Algorithm::zerofl || cfg.algorithm == Algorithm::flash) {
            next = aggregate_nonzero_avg(std::vector<double>(before.size(), 0.0), payloads);
        } else {
            next = aggregate_fedavg(before, deltas, agg_weights);
        }
        for (std::size_t l = 0; l < global.num_layers(); ++l) {
            Tensor& b = global.mutable_bias(l);
            std::vector<std::vector<double>> bias_deltas;
            for (const auto& u : updates) {
                std::vector<double> d(b.size());
                for (std::size_t i = 0; i < b.size(); ++i) d[i] = u.biases[l][i] - b[i];
                bias_deltas.push_back(std::move(d));
            }
            b.raw() = aggregate_fedavg(b.values(), bias_deltas, agg_weights);
        }
        global.set_flat_weights(next);

        if (cfg.algorithm == Algorithm::flash && !result.flash_mask) {
            std::vector<std::vector<double>> sparsities;
            for (const auto& u : updates) {
                sparsities.push_back(layer_sparsities_of(topk_global(u.weights, u.target), offsets));
            }
            result.flash_mask = flash_sensitivity_mask(global, sparsities, cfg.groups.front().target);
            apply_mask(global, *result.flash_mask);
        }
        if (cfg.algorithm == Algorithm::naive_powerprop && t + 1 == cfg.rounds) {
            prune_model_global(global, cfg.groups.front().target);
        }

        const auto after = global.flat_weights();
        for (const auto& v : after) {
            if (!std::isfinite(v)) throw NumericError("round " + std::to_string(t) + ": non-finite global weights");
        }

        RoundReport r;
        r.round = t;
        r.test_accuracy = evaluate(global, eval_reparam, data.test);
        const auto sr = sparsity_report(global);
        r.global_sparsity = sr.global_sparsity;
        r.per_layer_sparsity = sr.per_layer_sparsity;
        const auto comm = comm_cost(before, payloads);
        r.downlink_nnz = comm.downlink_nnz;
        r.uplink_nnz_mean = comm.uplink_nnz_mean;
        cumulative += comm.downlink_nnz + comm.uplink_nnz_mean;
        r.cumulative_comm_nnz = cumulative;
        std::size_t regrowth = 0;
        for (const auto& u : updates) regrowth += u.regrowth;
        r.mean_client_regrowth = static_cast<std::size_t>(
            std::llround(static_cast<double>(regrowth) / static_cast<double>(updates.size())));
        if (t % cfg.mask_every == 0) r.mask = mask_of(global);
        const auto wm = weight_movement(initial_flat, before, after, deltas);
        r.global_l2_from_init = wm.global_l2;
        r.round_l2 = wm.round_l2;
        r.round_cosine = wm.round_cosine;
        r.client_cosine_mean = wm.client_cosine_mean;
        result.reports.push_back(std::move(r));
    }
    return result;
}

}  // namespace sparsyfed
