// Command-line entry point: simulate --config <path> [--out <dir>] [--jobs N] [--dry-run]

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include <fmt/format.h>

#include "sparsyfed/config.hpp"
#include "sparsyfed/error.hpp"
#include "sparsyfed/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Sparse federated training simulator"};
    std::string config_path;
    std::string out_dir;
    std::size_t jobs = 1;
    bool dry_run = false;
    app.add_option("--config", config_path, "Experiment config (TOML)")->required();
    app.add_option("--out", out_dir, "Output directory (defaults to output_dir from the config)");
    app.add_option("--jobs", jobs, "Maximum concurrent runs")->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", dry_run, "Validate and print the run matrix without executing");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    sparsyfed::ExperimentSpec spec;
    try {
        spec = sparsyfed::parse_config(config_path);
    } catch (const sparsyfed::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    const std::filesystem::path out = out_dir.empty() ? std::filesystem::path(spec.output_dir) : std::filesystem::path(out_dir);
    const auto cells = sparsyfed::resolve_runs(spec);

    if (dry_run) {
        std::cout << fmt::format("{} run(s), output under {}\n", cells.size(), out.string());
        for (const auto& c : cells) {
            const auto cfg = sparsyfed::make_run_config(spec, c);
            std::cout << fmt::format("  {}  rounds={} clients={}/{} beta={:g}\n", c.name(), cfg.rounds,
                                     cfg.clients_per_round, cfg.clients_total, cfg.reparam.beta);
        }
        return 0;
    }
    try {
        return sparsyfed::run_experiment(spec, out, jobs, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
