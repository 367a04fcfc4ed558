#include "doctest.h"
#include "fixtures.hpp"

#include "sparsyfed/error.hpp"
#include "sparsyfed/federation.hpp"
#include "sparsyfed/rng.hpp"
#include "sparsyfed/sparsity.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <set>

using namespace sparsyfed;

namespace {

const SyntheticSpec kSpec{4, 8, 40, 4.0};

FedConfig small_config(Algorithm a, double target, int rounds = 3) {
    FedConfig c;
    c.rounds = rounds;
    c.clients_total = 8;
    c.clients_per_round = 4;
    c.algorithm = a;
    c.set_uniform_target(target);
    c.lr_start = 0.2;
    c.lr_end = 0.05;
    return c;
}

ClientTask task_for(const FederatedData& d, std::size_t id, double target, double eta = 0.1) {
    ClientTask t;
    t.client_id = id;
    t.eta = eta;
    t.target = target;
    t.seed = 99 + id;
    t.indices = d.partition.clients[id];
    return t;
}

void check_same_reports(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].test_accuracy == b[i].test_accuracy);
        CHECK(a[i].global_sparsity == b[i].global_sparsity);
        CHECK(a[i].per_layer_sparsity == b[i].per_layer_sparsity);
        CHECK(a[i].cumulative_comm_nnz == b[i].cumulative_comm_nnz);
        CHECK(a[i].mean_client_regrowth == b[i].mean_client_regrowth);
        CHECK(a[i].global_l2_from_init == b[i].global_l2_from_init);
        CHECK(a[i].client_cosine_mean == b[i].client_cosine_mean);
        CHECK(a[i].mask == b[i].mask);
    }
}

}  // namespace

TEST_CASE("zero rounds leave the model untouched") {
    auto d = fixtures::federated(kSpec, 8, 1.0, 1);
    auto m = fixtures::model_for(kSpec, {6}, 1);
    auto r = run_federation(small_config(Algorithm::sparsyfed, 0.9, 0), d, m);
    CHECK(r.reports.empty());
    CHECK(r.final_model.weights() == m.weights());
    CHECK(r.final_model.biases() == m.biases());
}

TEST_CASE("one dense client matches centralized SGD") {
    auto d = fixtures::federated(kSpec, 1, 1.0, 2);
    auto m = fixtures::model_for(kSpec, {6}, 2);
    FedConfig c = small_config(Algorithm::dense, 0.0, 4);
    c.clients_total = 1;
    c.clients_per_round = 1;
    c.local_epochs = 2;
    c.set_uniform_target(0.0);
    auto fed = run_federation(c, d, m);

    // Centralized: same batches, same learning rates, no server.
    Model central = m;
    const LrSchedule sched{c.lr_start, c.lr_end, c.rounds};
    Reparam rp;
    for (int t = 0; t < c.rounds; ++t) {
        const auto seed = derive_seed({c.global_seed, c.sampling_seed, static_cast<std::uint64_t>(t), 0});
        for (int e = 0; e < c.local_epochs; ++e) {
            for (const auto& idx : make_batches(d.partition.clients[0], c.batch_size,
                                                derive_seed({seed, static_cast<std::uint64_t>(e)}))) {
                const Batch b = gather_batch(d.train, idx);
                auto [trace, loss] = forward(central, rp, b);
                sgd_step(central, backward(central, rp, trace, b.labels), lr_at(sched, t));
            }
        }
    }
    const auto a = fed.final_model.flat_weights(), b = central.flat_weights();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    CHECK(worst < 1e-12);
    for (std::size_t l = 0; l < central.num_layers(); ++l)
        for (std::size_t i = 0; i < central.bias(l).size(); ++i)
            CHECK(fed.final_model.bias(l)[i] == doctest::Approx(central.bias(l)[i]).epsilon(1e-12));
}

TEST_CASE("runs are deterministic, with and without client threads") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 3);
    auto m = fixtures::model_for(kSpec, {6}, 3);
    for (auto a : {Algorithm::sparsyfed, Algorithm::zerofl, Algorithm::flash}) {
        auto c = small_config(a, 0.8);
        auto r1 = run_federation(c, d, m);
        auto r2 = run_federation(c, d, m);
        c.client_threads = 3;
        auto r3 = run_federation(c, d, m);
        check_same_reports(r1.reports, r2.reports);
        check_same_reports(r1.reports, r3.reports);
        CHECK(r1.final_model.weights() == r3.final_model.weights());
    }
}

TEST_CASE("sparsyfed with beta 1 and no activation pruning is the top-k baseline") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 4);
    auto m = fixtures::model_for(kSpec, {6}, 4);
    auto c = small_config(Algorithm::sparsyfed, 0.8, 5);
    c.reparam = {ReparamKind::powerprop, 1.0};
    c.activation_pruning = false;
    std::vector<std::vector<double>> a_updates, b_updates;
    auto ra = run_federation(c, d, m, [&](int, const ClientUpdate& u) { a_updates.push_back(u.weights); });
    c.algorithm = Algorithm::topk;
    auto rb = run_federation(c, d, m, [&](int, const ClientUpdate& u) { b_updates.push_back(u.weights); });
    CHECK(a_updates == b_updates);
    CHECK(ra.final_model.weights() == rb.final_model.weights());
    check_same_reports(ra.reports, rb.reports);
}

TEST_CASE("clients with every mechanism disabled reduce to the dense client") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 5);
    auto m = fixtures::model_for(kSpec, {6}, 5);
    FedConfig c = small_config(Algorithm::sparsyfed, 0.0);
    c.reparam = {ReparamKind::powerprop, 1.0};
    c.activation_pruning = false;
    const auto task = task_for(d, 2, 0.0);
    const auto dense = client_dense(m, d.train, task, c);
    CHECK(client_sparsyfed(m, d.train, task, c).weights == dense.weights);
    CHECK(client_topk(m, d.train, task, c).weights == dense.weights);
    CHECK(client_zerofl(m, d.train, task, c).weights == dense.weights);
    CHECK(client_flash(m, d.train, task, c, nullptr).weights == dense.weights);
    CHECK(client_naive_powerprop(m, d.train, task, c).weights == dense.weights);
    CHECK(dense.pseudo_gradient.size() == m.parameter_count());
}

TEST_CASE("sparse clients respect the nnz bound") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 6);
    auto m = fixtures::model_for(kSpec, {6}, 6);
    const std::size_t n = m.parameter_count();
    for (double s : {0.5, 0.9}) {
        FedConfig c = small_config(Algorithm::topk, s);
        const auto task = task_for(d, 1, s);
        for (const auto& u : {client_topk(m, d.train, task, c), client_sparsyfed(m, d.train, task, c),
                              client_zerofl(m, d.train, task, c)}) {
            CHECK(u.nnz == keep_count(n, s));
            CHECK(SparseMask::of_values(u.weights).popcount() == u.nnz);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(u.pseudo_gradient[i] == u.weights[i] - m.flat_weights()[i]);
        }
        CHECK(client_dense(m, d.train, task, c).nnz == n);
        CHECK(client_naive_powerprop(m, d.train, task, c).nnz == n);
    }
}

TEST_CASE("sparsyfed never regrows pruned weights with beta > 1") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 7);
    auto m = fixtures::model_for(kSpec, {6}, 7);
    prune_model_global(m, 0.7);
    FedConfig c = small_config(Algorithm::sparsyfed, 0.7);
    const auto u = client_sparsyfed(m, d.train, task_for(d, 0, 0.7, 0.3), c);
    CHECK(u.regrowth == 0);
    CHECK(u.mask_after.popcount() <= u.mask_before.popcount());
}

TEST_CASE("sparsyfed prunes stored activations to the layer weight sparsity") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 8);
    auto m = fixtures::model_for(kSpec, {6}, 8);
    prune_model_global(m, 0.6);
    FedConfig c = small_config(Algorithm::sparsyfed, 0.6);
    std::size_t steps = 0;
    client_sparsyfed(m, d.train, task_for(d, 0, 0.6), c, [&](const StepObservation& o) {
        for (std::size_t l = 0; l < o.forward_model.num_layers(); ++l) {
            const auto& a = o.trace.inputs[l];
            const double s = layer_sparsity(o.forward_model.weight(l));
            CHECK(a.count_nonzero() <= keep_count(a.size(), s));
        }
        ++steps;
    });
    CHECK(steps > 0);
}

TEST_CASE("zerofl forward weights are per-layer sparse, stored weights stay dense") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 9);
    auto m = fixtures::model_for(kSpec, {6}, 9);
    FedConfig c = small_config(Algorithm::zerofl, 0.75);
    std::size_t steps = 0;
    client_zerofl(m, d.train, task_for(d, 3, 0.75), c, [&](const StepObservation& o) {
        std::size_t fwd_nnz = 0;
        for (std::size_t l = 0; l < o.forward_model.num_layers(); ++l) {
            const auto& w = o.forward_model.weight(l);
            CHECK(w.count_nonzero() == keep_count(w.size(), 0.75));
            CHECK(o.trace.inputs[l].count_nonzero() <= keep_count(o.trace.inputs[l].size(), 0.75));
            fwd_nnz += w.count_nonzero();
        }
        CHECK(mask_of(o.updated_model).popcount() >= fwd_nnz);
        ++steps;
    });
    CHECK(steps > 0);
}

TEST_CASE("flash keeps its fixed mask") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 10);
    auto m = fixtures::model_for(kSpec, {6}, 10);
    FedConfig c = small_config(Algorithm::flash, 0.8, 5);
    std::vector<std::vector<double>> payloads;
    auto r = run_federation(c, d, m, [&](int t, const ClientUpdate& u) {
        if (t > 0) payloads.push_back(u.weights);
    });
    REQUIRE(r.flash_mask);
    const auto& mask = *r.flash_mask;
    CHECK(mask.popcount() == keep_count(m.parameter_count(), 0.8));
    for (const auto& p : payloads)
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] != 0.0) CHECK(mask.test(i));
    for (const auto& rep : r.reports) CHECK(*rep.mask == mask);
    // Round zero trains dense.
    const auto t0 = task_for(d, 0, 0.8);
    CHECK(client_flash(m, d.train, t0, c, nullptr).weights == client_dense(m, d.train, t0, c).weights);
    // The same mask twice gives the same update.
    CHECK(client_flash(m, d.train, t0, c, &mask).weights == client_flash(m, d.train, t0, c, &mask).weights);
}

TEST_CASE("naive powerprop is pruned only at the end") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 11);
    auto m = fixtures::model_for(kSpec, {6}, 11);
    FedConfig c = small_config(Algorithm::naive_powerprop, 0.9, 3);
    std::set<std::size_t> nnz;
    auto r = run_federation(c, d, m, [&](int, const ClientUpdate& u) { nnz.insert(u.nnz); });
    CHECK(nnz == std::set<std::size_t>{m.parameter_count()});
    CHECK(r.reports[0].global_sparsity == 0.0);
    CHECK(mask_of(r.final_model).popcount() == keep_count(m.parameter_count(), 0.9));
    CHECK(r.reports.back().global_sparsity ==
          doctest::Approx(1.0 - static_cast<double>(keep_count(m.parameter_count(), 0.9)) /
                                    static_cast<double>(m.parameter_count())));
    c.reparam = {ReparamKind::powerprop, 1.0};
    c.rounds = 2;
    auto pp = run_federation(c, d, m);
    c.algorithm = Algorithm::dense;
    auto dense = run_federation(c, d, m);
    CHECK(pp.reports[0].test_accuracy == dense.reports[0].test_accuracy);
}

TEST_CASE("fedavg examples") {
    std::vector<double> base{2, 3};
    CHECK(aggregate_fedavg(base, {{1, 0}, {0, 1}}) == std::vector<double>{2.5, 3.5});
    CHECK(aggregate_fedavg(base, {{1, -1}}) == std::vector<double>{3, 2});
    CHECK(aggregate_fedavg(base, {{0, 0}, {0, 0}}) == base);
    CHECK(aggregate_fedavg(base, {{1, 0}, {0, 1}}, std::vector<double>{0.75, 0.25}) ==
          std::vector<double>{2.75, 3.25});
    // Linearity in the updates.
    std::vector<std::vector<double>> u{{0.5, -1}, {2, 0.25}, {1, 1}};
    auto once = aggregate_fedavg(base, u);
    for (auto& v : u)
        for (auto& x : v) x *= 3.0;
    auto thrice = aggregate_fedavg(base, u);
    for (std::size_t j = 0; j < 2; ++j) CHECK(thrice[j] - base[j] == doctest::Approx(3.0 * (once[j] - base[j])));
    CHECK_THROWS_AS(aggregate_fedavg(base, {{1, 2, 3}}), ConfigError);
}

TEST_CASE("nonzero averaging examples") {
    std::vector<double> base{1, 1, 5};
    CHECK(aggregate_nonzero_avg(base, {{1, 0, 0}, {0, 1, 0}}) == std::vector<double>{2, 2, 5});
    CHECK(aggregate_nonzero_avg(base, {{4, 0, 0}, {2, 0, 0}}) == std::vector<double>{4, 1, 5});
    CHECK(aggregate_nonzero_avg(base, {{0.5, -2, 1}}) == aggregate_fedavg(base, {{0.5, -2, 1}}));
}

TEST_CASE("flash sensitivity mask") {
    SUBCASE("layers already at the target keep a uniform split") {
        Model m = Model::initialize(mlp_architecture(10, {10}, 10), 1);
        auto mask = flash_sensitivity_mask(m, {{0.9, 0.9}, {0.9, 0.9}}, 0.9);
        const auto off = mask.layer_offsets();
        for (std::size_t l = 0; l < 2; ++l) {
            std::size_t kept = 0;
            for (std::size_t i = off[l]; i < off[l + 1]; ++i) kept += mask.test(i);
            CHECK(kept == 10);
        }
    }
    SUBCASE("d = [0.8, 1.0] at 0.9 moves the whole budget to the first layer") {
        Model m = Model::initialize(mlp_architecture(10, {10}, 10), 2);
        auto mask = flash_sensitivity_mask(m, {{0.8, 1.0}}, 0.9);
        const auto off = mask.layer_offsets();
        std::size_t first = 0, second = 0;
        for (std::size_t i = off[0]; i < off[1]; ++i) first += mask.test(i);
        for (std::size_t i = off[1]; i < off[2]; ++i) second += mask.test(i);
        CHECK(first == 20);
        CHECK(second == 0);
        // Survivors are the largest entries of the layer.
        const auto top = topk_per_layer(m.weight(0), 0.8);
        for (std::size_t i = 0; i < 100; ++i) CHECK(mask.test(i) == (top[i] != 0.0));
    }
    SUBCASE("budget out of reach") {
        Model m = Model::initialize(mlp_architecture(10, {10}, 10), 3);
        CHECK_THROWS_AS(flash_sensitivity_mask(m, {{1.0, 1.0}}, 0.9), ConfigError);
    }
    SUBCASE("unequal layers still hit the budget exactly") {
        Model m = Model::initialize(mlp_architecture(7, {13, 5}, 3), 4);
        for (double s : {0.5, 0.8, 0.95}) {
            auto mask = flash_sensitivity_mask(m, {{0.7, 0.95, 0.3}, {0.6, 0.9, 0.5}}, s);
            CHECK(mask.popcount() == keep_count(m.parameter_count(), s));
        }
    }
}

TEST_CASE("client sampling") {
    auto all = sample_clients(10, 10, 3, 5378);
    std::vector<std::size_t> expect(10);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(all == expect);
    bool differs = false;
    for (int t = 0; t < 20; ++t) {
        auto s = sample_clients(100, 10, t, 5378);
        CHECK(s.size() == 10);
        CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 10);
        CHECK(std::is_sorted(s.begin(), s.end()));
        CHECK(s == sample_clients(100, 10, t, 5378));
        differs |= s != sample_clients(100, 10, t, 9421);
    }
    CHECK(differs);
    CHECK_THROWS_AS(sample_clients(5, 6, 0, 1), ConfigError);
}

TEST_CASE("heterogeneous groups") {
    FedConfig c = small_config(Algorithm::sparsyfed, 0.9, 4);
    c.groups = {{3, 0.99}, {3, 0.95}, {2, 0.9}};
    CHECK(c.target_for(0) == 0.99);
    CHECK(c.target_for(3) == 0.95);
    CHECK(c.target_for(7) == 0.9);
    CHECK_THROWS_AS(c.target_for(8), UsageError);
    auto d = fixtures::federated(kSpec, 8, 0.5, 12);
    auto m = fixtures::model_for(kSpec, {6}, 12);
    std::size_t seen = 0;
    run_federation(c, d, m, [&](int, const ClientUpdate& u) {
        CHECK(u.target == c.target_for(u.client_id));
        CHECK(u.nnz <= keep_count(m.parameter_count(), u.target));
        ++seen;
    });
    CHECK(seen == 16);
}

TEST_CASE("config validation") {
    FedConfig c = small_config(Algorithm::flash, 0.9);
    c.groups = {{4, 0.9}, {4, 0.8}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config(Algorithm::sparsyfed, 0.9);
    c.groups = {{4, 0.9}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.set_uniform_target(1.0);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config(Algorithm::sparsyfed, 0.9);
    c.clients_per_round = 9;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(algorithm_from_string("zerofl") == Algorithm::zerofl);
    CHECK_THROWS_AS(algorithm_from_string("zero-fl"), ConfigError);
}

TEST_CASE("diverging training reports round and client") {
    auto d = fixtures::federated(kSpec, 8, 0.5, 13);
    auto m = fixtures::model_for(kSpec, {6}, 13);
    FedConfig c = small_config(Algorithm::dense, 0.0, 3);
    c.lr_start = 1e200;
    c.lr_end = 1e200;
    try {
        run_federation(c, d, m);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("round ") == 0);
    }
}
