#include "sparsyfed/experiment.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <fmt/os.h>

#include "sparsyfed/error.hpp"
#include "sparsyfed/rng.hpp"

namespace sparsyfed {

namespace {

std::string fmt_num(double v) { return fmt::format("{:g}", v); }

}  // namespace

std::string RunCell::group_name() const {
    return fmt::format("{}_s{}_a{}_ap{}", to_string(algorithm), target ? fmt_num(*target) : std::string("groups"),
                       fmt_num(alpha), activation_pruning ? "on" : "off");
}

std::string RunCell::name() const { return fmt::format("{}_seed{}", group_name(), seed); }

std::vector<RunCell> resolve_runs(const ExperimentSpec& spec) {
    std::vector<std::optional<double>> targets;
    for (double s : spec.sweep.target_sparsity) targets.emplace_back(s);
    if (targets.empty()) targets.emplace_back(std::nullopt);
    std::vector<RunCell> cells;
    for (auto alg : spec.sweep.algorithms) {
        for (const auto& t : targets) {
            for (double a : spec.sweep.alpha) {
                for (bool ap : spec.sweep.activation_pruning) {
                    for (auto seed : spec.sweep.seeds) cells.push_back({alg, t, a, ap, seed});
                }
            }
        }
    }
    return cells;
}

FedConfig make_run_config(const ExperimentSpec& spec, const RunCell& cell) {
    FedConfig cfg = spec.base;
    cfg.algorithm = cell.algorithm;
    if (cell.target) cfg.set_uniform_target(*cell.target);
    cfg.activation_pruning = cell.activation_pruning;
    cfg.sampling_seed = cell.seed;
    cfg.validate();
    return cfg;
}

PreparedRun prepare_run(const ExperimentSpec& spec, const RunCell& cell) {
    const std::uint64_t g = spec.base.global_seed;
    PreparedRun run;
    if (spec.dataset.kind == DatasetKind::synthetic) {
        std::tie(run.data.train, run.data.test) = make_synthetic(spec.dataset.synthetic, g);
    } else {
        std::tie(run.data.train, run.data.test) = split_train_test(load_csv(spec.dataset.csv_path), g);
    }
    run.data.partition = lda_partition(run.data.train.labels, run.data.train.num_classes, spec.base.clients_total,
                                       cell.alpha, g);
    const auto arch = spec.model.architecture(run.data.train.dim(),
                                              static_cast<std::size_t>(run.data.train.num_classes));
    run.initial = Model::initialize(arch, derive_seed({g, 0x1417}));
    return run;
}

RunOutcome execute_run(const ExperimentSpec& spec, const RunCell& cell, const std::filesystem::path& dir) {
    RunOutcome out;
    out.cell = cell;
    try {
        const FedConfig cfg = make_run_config(spec, cell);
        const PreparedRun prep = prepare_run(spec, cell);
        const auto result = run_federation(cfg, prep.data, prep.initial);

        std::filesystem::create_directories(dir);
        write_rounds_csv(dir / "rounds.csv", result.reports);
        write_layer_sparsity_csv(dir / "layer_sparsity.csv", result.reports);
        std::vector<SparseMask> masks;
        std::vector<int> mask_rounds;
        for (const auto& r : result.reports) {
            if (r.mask) {
                masks.push_back(*r.mask);
                mask_rounds.push_back(r.round);
            }
        }
        write_iou_csv(dir / "iou_matrix.csv", iou_matrix(masks));

        nlohmann::json final_metrics = nlohmann::json::object();
        if (!result.reports.empty()) {
            const auto& last = result.reports.back();
            out.final_accuracy = last.test_accuracy;
            out.final_sparsity = last.global_sparsity;
            out.cumulative_comm_nnz = last.cumulative_comm_nnz;
            final_metrics = {{"round", last.round},
                             {"test_accuracy", last.test_accuracy},
                             {"global_sparsity", last.global_sparsity},
                             {"cumulative_comm_nnz", last.cumulative_comm_nnz},
                             {"per_layer_sparsity", last.per_layer_sparsity}};
        } else {
            out.final_accuracy = evaluate(prep.initial, cfg.effective_reparam(), prep.data.test);
            out.final_sparsity = sparsity_report(prep.initial).global_sparsity;
            final_metrics = {{"round", -1}, {"test_accuracy", out.final_accuracy},
                             {"global_sparsity", out.final_sparsity}, {"cumulative_comm_nnz", 0}};
        }
        nlohmann::json summary = {
            {"experiment", to_json(spec)},
            {"run",
             {{"name", cell.name()},
              {"algorithm", to_string(cell.algorithm)},
              {"target_sparsity", cell.target ? nlohmann::json(*cell.target) : nlohmann::json(nullptr)},
              {"alpha", cell.alpha},
              {"activation_pruning", cell.activation_pruning},
              {"sampling_seed", cell.seed}}},
            {"config", to_json(cfg)},
            {"final", final_metrics},
            {"iou_rounds", mask_rounds},
            {"seeds",
             {{"global", cfg.global_seed},
              {"sampling", cfg.sampling_seed},
              {"partition", cfg.global_seed},
              {"model_init", derive_seed({cfg.global_seed, 0x1417})},
              {"data", cfg.global_seed}}},
        };
        std::ofstream js(dir / "summary.json");
        js << summary.dump(2) << "\n";
        if (!js) throw ConfigError("cannot write summary.json in " + dir.string());
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
    }
    return out;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<RunOutcome>& outcomes) {
    struct Cell {
        const RunCell* first = nullptr;
        std::vector<const RunOutcome*> runs;
    };
    std::vector<std::string> order;
    std::map<std::string, Cell> cells;
    for (const auto& o : outcomes) {
        const auto key = o.cell.group_name();
        if (!cells.count(key)) {
            order.push_back(key);
            cells[key].first = &o.cell;
        }
        cells[key].runs.push_back(&o);
    }
    auto out = fmt::output_file(path.string());
    out.print("algorithm,target_sparsity,alpha,activation_pruning,runs,failed,final_accuracy_mean,"
              "final_accuracy_std,final_global_sparsity_mean,cumulative_comm_nnz_mean\n");
    for (const auto& key : order) {
        const auto& c = cells[key];
        std::vector<const RunOutcome*> ok;
        for (const auto* r : c.runs) {
            if (r->ok) ok.push_back(r);
        }
        double acc = 0.0, sp = 0.0, comm = 0.0;
        for (const auto* r : ok) {
            acc += r->final_accuracy;
            sp += r->final_sparsity;
            comm += static_cast<double>(r->cumulative_comm_nnz);
        }
        const double n = static_cast<double>(ok.size());
        double sd = 0.0;
        if (ok.size() > 1) {
            const double mean = acc / n;
            for (const auto* r : ok) sd += (r->final_accuracy - mean) * (r->final_accuracy - mean);
            sd = std::sqrt(sd / (n - 1.0));
        }
        out.print("{},{},{},{},{},{},{:.10g},{:.10g},{:.10g},{:.10g}\n", to_string(c.first->algorithm),
                  c.first->target ? fmt_num(*c.first->target) : std::string("groups"), fmt_num(c.first->alpha),
                  c.first->activation_pruning ? "on" : "off", c.runs.size(), c.runs.size() - ok.size(),
                  ok.empty() ? 0.0 : acc / n, sd, ok.empty() ? 0.0 : sp / n, ok.empty() ? 0.0 : comm / n);
    }
}

int run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir, std::size_t jobs,
                   std::ostream& log) {
    const auto cells = resolve_runs(spec);
    std::filesystem::create_directories(out_dir);
    std::vector<RunOutcome> outcomes(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            outcomes[i] = execute_run(spec, cells[i], out_dir / cells[i].name());
            std::lock_guard lock(log_mutex);
            if (outcomes[i].ok) {
                log << fmt::format("[{}/{}] {} accuracy={:.4f} sparsity={:.4f}\n", i + 1, cells.size(),
                                   cells[i].name(), outcomes[i].final_accuracy, outcomes[i].final_sparsity);
            } else {
                log << fmt::format("[{}/{}] {} FAILED: {}\n", i + 1, cells.size(), cells[i].name(),
                                   outcomes[i].error);
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, cells.size()));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    write_summary_csv(out_dir / "summary.csv", outcomes);
    const bool all_ok = std::all_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.ok; });
    return all_ok ? 0 : 1;
}

}  // namespace sparsyfed
