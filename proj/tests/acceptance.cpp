// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "topk_contract.hpp"

#include "sparsyfed/data.hpp"
#include "sparsyfed/federation.hpp"
#include "sparsyfed/metrics.hpp"
#include "sparsyfed/rng.hpp"
#include "sparsyfed/sparsity.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace sparsyfed;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > limit_s) {
        o.pass = false;
        o.detail += fmt::format("; over the {:.0f} s limit", limit_s);
    }
    if (!o.pass) ++failures;
    fmt::print("{} [{:>2}] {}: {} ({:.1f} s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail, secs);
    std::fflush(stdout);
}

const std::vector<std::uint64_t> kSeeds{5378, 9421, 2035};

// Shared dynamics setup: 10 classes, 100 clients, alpha 0.1, 50 rounds.
const SyntheticSpec kDynData{10, 32, 400, 8.0};

FedConfig dynamics_config(Algorithm a, double target, std::uint64_t seed) {
    FedConfig c;
    c.rounds = 50;
    c.clients_total = 100;
    c.clients_per_round = 10;
    c.algorithm = a;
    c.set_uniform_target(target);
    c.reparam = {ReparamKind::powerprop, 1.25};
    c.lr_start = 0.3;
    c.lr_end = 0.01;
    c.sampling_seed = seed;
    return c;
}

struct DynamicsRuns {
    // key: algorithm name + target, one entry per seed
    std::map<std::string, std::vector<FederationResult>> runs;
};

const DynamicsRuns& dynamics() {
    static const DynamicsRuns cache = [] {
        DynamicsRuns d;
        const auto data = fixtures::federated(kDynData, 100, 0.1, 1337);
        const auto init = fixtures::model_for(kDynData, {32}, 1337);
        const std::vector<std::pair<Algorithm, double>> cells{{Algorithm::sparsyfed, 0.9},
                                                              {Algorithm::topk, 0.9},
                                                              {Algorithm::zerofl, 0.9},
                                                              {Algorithm::sparsyfed, 0.95},
                                                              {Algorithm::dense, 0.95}};
        for (const auto& [a, s] : cells)
            for (auto seed : kSeeds)
                d.runs[to_string(a) + fmt::format("@{}", s)].push_back(
                    run_federation(dynamics_config(a, s, seed), data, init));
        return d;
    }();
    return cache;
}

double mean_regrowth(const std::vector<FederationResult>& runs) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : runs)
        for (const auto& rep : r.reports) {
            total += static_cast<double>(rep.mean_client_regrowth);
            ++n;
        }
    return total / static_cast<double>(n);
}

double worst_deviation(const FederationResult& r, int from, double target) {
    double worst = 0.0;
    for (const auto& rep : r.reports)
        if (rep.round >= from) worst = std::max(worst, std::fabs(rep.global_sparsity - target));
    return worst;
}

double min_consecutive_iou(const FederationResult& r, int after) {
    double worst = 1.0;
    for (std::size_t t = 1; t < r.reports.size(); ++t)
        if (r.reports[t].round > after) worst = std::min(worst, mask_iou(*r.reports[t - 1].mask, *r.reports[t].mask));
    return worst;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Relative path -> bytes for every regular file below `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

}  // namespace

int main() {
    criterion(1, "gradient fidelity", 10, [] {
        double worst_fd = 0.0, worst_oracle = 0.0;
        int probes = 0, combos = 0;
        bool ok = true;
        for (auto kind : {LayerKind::dense, LayerKind::conv2d})
            for (auto rk : {ReparamKind::identity, ReparamKind::powerprop, ReparamKind::spectral_exponent,
                            ReparamKind::spectral_rescale})
                for (bool ap : {false, true}) {
                    const auto r = gradcheck::run(kind, rk, ap, 1000 + static_cast<std::uint64_t>(combos), 100);
                    ok = ok && r.pruned_inputs_match && r.fd_max_rel < 1e-5 && r.oracle_max_abs < 1e-9 &&
                         r.probes >= 100;
                    worst_fd = std::max(worst_fd, r.fd_max_rel);
                    worst_oracle = std::max(worst_oracle, r.oracle_max_abs);
                    probes += r.probes;
                    ++combos;
                }
        return Outcome{ok, fmt::format("{} combinations, {} probes, max fd rel err {:.2e} (tol 1e-5), "
                                       "max oracle abs err {:.2e}",
                                       combos, probes, worst_fd, worst_oracle)};
    });

    criterion(2, "top-k contract suite", 5, [] {
        const auto r = topk_contract::run(64, 7);
        std::string detail = fmt::format("{} cases up to n=64, {} violations", r.cases, r.failures.size());
        if (!r.failures.empty()) detail += "; first: " + r.failures.front();
        return Outcome{r.failures.empty(), detail};
    });

    criterion(3, "sparsyfed(beta=1, no act-prune) == top-k", 30, [] {
        const auto data = fixtures::federated(kDynData, 10, 0.1, 1337);
        const auto init = fixtures::model_for(kDynData, {32}, 1337);
        FedConfig c = dynamics_config(Algorithm::sparsyfed, 0.9, 5378);
        c.rounds = 20;
        c.clients_total = 10;
        c.clients_per_round = 10;
        c.set_uniform_target(0.9);
        c.reparam = {ReparamKind::powerprop, 1.0};
        c.activation_pruning = false;
        std::vector<std::vector<double>> ua, ub;
        const auto a = run_federation(c, data, init, [&](int, const ClientUpdate& u) { ua.push_back(u.weights); });
        c.algorithm = Algorithm::topk;
        const auto b = run_federation(c, data, init, [&](int, const ClientUpdate& u) { ub.push_back(u.weights); });
        bool same = ua == ub && a.final_model.weights() == b.final_model.weights() &&
                    a.final_model.biases() == b.final_model.biases() && a.reports.size() == b.reports.size();
        for (std::size_t t = 0; same && t < a.reports.size(); ++t) {
            same = a.reports[t].test_accuracy == b.reports[t].test_accuracy &&
                   a.reports[t].global_l2_from_init == b.reports[t].global_l2_from_init &&
                   a.reports[t].mask == b.reports[t].mask;
        }
        return Outcome{same, fmt::format("{} rounds, {} client updates compared bitwise", a.reports.size(), ua.size())};
    });

    // 4, 5, 7 and 8 share the runs built here; the 5 minute limit covers all of them.
    const auto t_dyn = std::chrono::steady_clock::now();
    criterion(4, "regrowth ordering", 300, [] {
        const auto& d = dynamics();
        const double sf = mean_regrowth(d.runs.at("sparsyfed@0.9"));
        const double zf = mean_regrowth(d.runs.at("zerofl@0.9"));
        const double tk = mean_regrowth(d.runs.at("topk@0.9"));
        return Outcome{sf < 0.2 * zf && sf < 0.5 * tk,
                       fmt::format("mean regrowth per round: sparsyfed {:.2f}, zerofl {:.2f}, top-k {:.2f}", sf, zf, tk)};
    });
    const double dyn_build_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_dyn).count();

    criterion(5, "sparsity consensus", 300 - dyn_build_s, [] {
        const auto& d = dynamics();
        bool ok = true;
        std::string detail;
        for (std::size_t i = 0; i < kSeeds.size(); ++i) {
            const double sf = worst_deviation(d.runs.at("sparsyfed@0.9")[i], 20, 0.9);
            const double tk = worst_deviation(d.runs.at("topk@0.9")[i], 20, 0.9);
            ok = ok && sf <= 0.05 && sf < tk;
            detail += fmt::format("{}seed {}: sparsyfed {:.4f} vs top-k {:.4f}", i ? "; " : "worst |s-0.9| from round 20, ",
                                  kSeeds[i], sf, tk);
        }
        return Outcome{ok, detail};
    });

    criterion(6, "flash fixed mask", 60, [] {
        const auto data = fixtures::federated(kDynData, 100, 0.1, 1337);
        const auto init = fixtures::model_for(kDynData, {32}, 1337);
        const auto r = run_federation(dynamics_config(Algorithm::flash, 0.9, 5378), data, init);
        const std::size_t n = init.parameter_count(), k = keep_count(n, 0.9);
        bool ok = r.flash_mask.has_value();
        std::size_t worst_off = 0;
        for (const auto& rep : r.reports) {
            if (rep.round >= 1) ok = ok && rep.mask && *rep.mask == *r.flash_mask;
            const auto nnz = rep.mask->popcount();
            worst_off = std::max(worst_off, nnz > k ? nnz - k : k - nnz);
        }
        ok = ok && worst_off <= 1;
        return Outcome{ok, fmt::format("{} rounds, mask unchanged after round 1, max |nnz - {}| = {}", r.reports.size(), k,
                                       worst_off)};
    });

    criterion(7, "mask consensus dynamics", 300 - dyn_build_s, [] {
        const auto& d = dynamics();
        bool ok = true;
        std::string detail;
        for (std::size_t i = 0; i < kSeeds.size(); ++i) {
            const double sf = min_consecutive_iou(d.runs.at("sparsyfed@0.9")[i], 30);
            const double tk = min_consecutive_iou(d.runs.at("topk@0.9")[i], 30);
            ok = ok && sf > 0.8 && tk < sf;
            detail += fmt::format("{}seed {}: sparsyfed {:.4f} vs top-k {:.4f}",
                                  i ? "; " : "min consecutive IoU after round 30, ", kSeeds[i], sf, tk);
        }
        return Outcome{ok, detail};
    });

    criterion(8, "communication ratio at 0.95", 300 - dyn_build_s, [] {
        const auto& d = dynamics();
        double worst = 0.0;
        for (std::size_t i = 0; i < kSeeds.size(); ++i) {
            const auto& sf = d.runs.at("sparsyfed@0.95")[i].reports;
            const auto& dn = d.runs.at("dense@0.95")[i].reports;
            for (std::size_t t = 20; t < sf.size(); ++t) {
                const double ratio = static_cast<double>(sf[t].downlink_nnz + sf[t].uplink_nnz_mean) /
                                     static_cast<double>(dn[t].downlink_nnz + dn[t].uplink_nnz_mean);
                worst = std::max(worst, ratio);
            }
        }
        return Outcome{worst <= 0.12, fmt::format("worst per-round traffic ratio from round 20: {:.4f} (limit 0.12)", worst)};
    });

    criterion(9, "learning at sparsity", 180, [] {
        const SyntheticSpec spec{10, 32, 400, 8.0};
        const auto data = fixtures::federated(spec, 10, 1000.0, 1337);
        const auto init = fixtures::model_for(spec, {32}, 1337);
        std::map<Algorithm, double> acc;
        for (auto a : {Algorithm::dense, Algorithm::sparsyfed, Algorithm::naive_powerprop})
            for (auto seed : kSeeds) {
                FedConfig c = dynamics_config(a, 0.9, seed);
                c.clients_total = 10;
                c.clients_per_round = 10;
                c.set_uniform_target(0.9);
                acc[a] += run_federation(c, data, init).reports.back().test_accuracy / static_cast<double>(kSeeds.size());
            }
        const double dense = acc[Algorithm::dense], sf = acc[Algorithm::sparsyfed], pp = acc[Algorithm::naive_powerprop];
        return Outcome{dense >= 0.95 && sf >= dense - 0.03 && pp < sf,
                       fmt::format("mean final accuracy: dense {:.4f}, sparsyfed {:.4f}, naive powerprop {:.4f}", dense,
                                   sf, pp)};
    });

    criterion(10, "LDA heterogeneity ordering", 10, [] {
        const auto [train, test] = make_synthetic(kDynData, 1337);
        double tv[3] = {0, 0, 0};
        const double alphas[3] = {0.1, 1.0, 1000.0};
        for (std::uint64_t seed = 0; seed < 10; ++seed)
            for (int a = 0; a < 3; ++a)
                tv[a] += mean_pairwise_tv(lda_partition(train.labels, 10, 100, alphas[a], seed), train.labels, 10) / 10.0;
        return Outcome{tv[0] > tv[1] && tv[1] > tv[2],
                       fmt::format("mean pairwise TV over 10 seeds: a=0.1 {:.4f}, a=1 {:.4f}, a=1000 {:.4f}", tv[0], tv[1],
                                   tv[2])};
    });

    criterion(11, "aggregator oracles", 1, [] {
        Rng rng(11);
        std::uniform_int_distribution<int> num(-64, 64), len(1, 100);
        std::bernoulli_distribution keep(0.3);
        std::size_t checked = 0, mismatches = 0;
        for (int trial = 0; trial < 200; ++trial) {
            const auto n = static_cast<std::size_t>(len(rng));
            std::vector<double> base(n);
            for (auto& v : base) v = num(rng) / 8.0;
            std::vector<std::vector<double>> ups(10, std::vector<double>(n, 0.0));
            for (auto& u : ups)
                for (auto& v : u)
                    if (keep(rng)) v = num(rng) / 16.0;
            const auto fa = aggregate_fedavg(base, ups);
            const auto nz = aggregate_nonzero_avg(base, ups);
            const std::vector<double> w{0.5, 0.125, 0.125, 0.0625, 0.0625, 0.03125, 0.03125, 0.03125, 0.015625, 0.015625};
            const auto fw = aggregate_fedavg(base, ups, w);
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0, sw = 0.0, snz = 0.0;
                int cnt = 0;
                for (std::size_t i = 0; i < ups.size(); ++i) {
                    s += ups[i][j];
                    sw += w[i] * ups[i][j];
                    if (ups[i][j] != 0.0) {
                        snz += ups[i][j];
                        ++cnt;
                    }
                }
                mismatches += fa[j] != base[j] + s / 10.0;
                mismatches += fw[j] != base[j] + sw;
                mismatches += nz[j] != base[j] + (cnt ? snz / cnt : 0.0);
                checked += 3;
            }
        }
        return Outcome{mismatches == 0, fmt::format("{} coordinates checked, {} mismatches", checked, mismatches)};
    });

    criterion(12, "heterogeneous group nnz bounds", 120, [] {
        const auto data = fixtures::federated(kDynData, 100, 0.1, 1337);
        const auto init = fixtures::model_for(kDynData, {32}, 1337);
        const std::size_t n = init.parameter_count();
        std::size_t updates = 0, violations = 0;
        for (auto a : {Algorithm::sparsyfed, Algorithm::topk, Algorithm::zerofl}) {
            FedConfig c = dynamics_config(a, 0.9, 5378);
            c.rounds = 30;
            c.groups = {{40, 0.99}, {30, 0.95}, {30, 0.9}};
            run_federation(c, data, init, [&](int, const ClientUpdate& u) {
                const double expect = u.client_id < 40 ? 0.99 : (u.client_id < 70 ? 0.95 : 0.9);
                violations += u.target != expect || u.nnz > keep_count(n, expect);
                ++updates;
            });
        }
        return Outcome{violations == 0 && updates == 3 * 30 * 10,
                       fmt::format("{} updates over 3 algorithms, {} violations", updates, violations)};
    });

    criterion(13, "end-to-end determinism", 120, [] {
        const fs::path dir = fs::temp_directory_path() / "sparsyfed_acceptance_determinism";
        fs::remove_all(dir);
        fs::create_directories(dir);
        {
            std::ofstream f(dir / "sweep.toml");
            f << "[dataset]\nclasses = 10\ndim = 32\nper_class = 100\nmargin = 8.0\n"
              << "[model]\nhidden = [32]\n"
              << "[federation]\nrounds = 10\nclients_total = 20\nclients_per_round = 5\nalpha = 0.1\n"
              << "[sparsity]\ntarget = 0.9\n"
              << "[algorithm]\nname = \"sparsyfed\"\n"
              << "[lr]\nstart = 0.3\nend = 0.01\n"
              << "[seeds]\nsampling = [5378, 9421]\n"
              << "[sweep]\nalgorithm = [\"sparsyfed\", \"topk\", \"zerofl\", \"flash\", \"naive_powerprop\", \"dense\"]\n"
              << "target_sparsity = [0.9, 0.95]\n";
        }
        auto run = [&](const std::string& out, int jobs) {
            const std::string cmd = fmt::format("{} --config {} --out {} --jobs {} > /dev/null 2>&1", SIMULATE_EXE,
                                                (dir / "sweep.toml").string(), (dir / out).string(), jobs);
            return std::system(cmd.c_str());
        };
        const bool ran = run("a", 1) == 0 && run("b", 1) == 0 && run("c", 4) == 0;
        const auto a = tree(dir / "a"), b = tree(dir / "b"), c = tree(dir / "c");
        const bool ok = ran && !a.empty() && a == b && a == c;
        fs::remove_all(dir);
        return Outcome{ok, fmt::format("{} files per sweep, reruns and --jobs 1 vs 4 {}", a.size(),
                                       a == b && a == c ? "byte-identical" : "differ")};
    });

    fmt::print("{} of 13 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
