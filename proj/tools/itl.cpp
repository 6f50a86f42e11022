// Command-line front end: run, validate, baseline, report.
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "itl/error.hpp"
#include "itl/experiment.hpp"

namespace fs = std::filesystem;
using namespace itl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitGeneric = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRunFailed = 3;

struct Common {
    std::string config;
    std::size_t seeds = 0;
    std::string out;
    std::size_t jobs = 1;
    std::string format = "csv";
    std::string checkpoint_dir;
    bool quiet = false;
};

void add_run_flags(CLI::App* cmd, Common& o) {
    cmd->add_option("--seeds", o.seeds, "Number of repeats (overrides the config)")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "Output directory (default: $ITL_OUT_DIR or ./results)");
    cmd->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--format", o.format, "Result format")->check(CLI::IsMember({"csv", "json"}));
    cmd->add_option("--checkpoint-dir", o.checkpoint_dir, "Save and resume per-run checkpoints here");
    cmd->add_flag("--quiet", o.quiet, "No progress output");
}

fs::path output_dir(const Common& o) {
    if (!o.out.empty()) return o.out;
    if (const char* env = std::getenv("ITL_OUT_DIR"); env && *env) return env;
    return "results";
}

std::string fmt(double v, const char* spec = "%.2f") {
    if (std::isnan(v)) return "n.a.";
    char buf[32];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

void print_summary(const ResultSet& r) {
    std::printf("%-16s %-14s %7s %16s %8s %6s %10s\n", "method", "scenario", "repeats", "accuracy", "mono", "sig",
                "p");
    for (const auto& s : r.summary) {
        const std::string acc = fmt(s.summary.mean) + " +- " + fmt(s.summary.std);
        std::printf("%-16s %-14s %7zu %16s %8s %6s %10s\n", s.method.c_str(), s.scenario.c_str(), s.summary.repeats,
                    acc.c_str(), fmt(s.summary.monotonicity, "%.3f").c_str(),
                    s.significance ? to_string(*s.significance).c_str() : "n.a.", fmt(s.p_value, "%.3g").c_str());
    }
    if (!r.summary.empty()) std::printf("config %s\n", r.summary.front().config_hash.c_str());
    for (const auto& f : r.failures) {
        std::printf("FAILED %s / %s / seed %llu: %s\n", f.method.c_str(), f.scenario.c_str(),
                    static_cast<unsigned long long>(f.seed), f.reason.c_str());
    }
}

int execute(const Common& o, GridOptions grid) {
    ExperimentConfig config = parse_config(o.config);
    if (o.seeds) config.repeats = o.seeds;
    grid.jobs = o.jobs;
    if (!o.checkpoint_dir.empty()) {
        fs::create_directories(o.checkpoint_dir);
        grid.checkpoint_dir = o.checkpoint_dir;
    }
    if (!o.quiet) grid.progress = [](const std::string& line) { std::cerr << line << '\n'; };
    const ResultSet results = run_experiment(config, grid);
    const fs::path dir = output_dir(o);
    emit_results(results, dir, o.format == "json" ? ResultFormat::Json : ResultFormat::Csv);
    print_summary(results);
    std::printf("results written to %s\n", dir.string().c_str());
    return results.failures.empty() ? kExitOk : kExitRunFailed;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Incremental transfer learning simulator"};
    app.require_subcommand(1);

    Common run_opts;
    auto* run = app.add_subcommand("run", "Run the full method x scenario x seed grid plus baselines");
    run->add_option("config", run_opts.config, "Experiment config (JSON)")->required();
    add_run_flags(run, run_opts);

    std::string validate_path;
    auto* validate = app.add_subcommand("validate", "Check a config and print its resolved form");
    validate->add_option("config", validate_path, "Experiment config (JSON)")->required();

    Common base_opts;
    std::string base_kind;
    auto* baseline = app.add_subcommand("baseline", "Run only a baseline over the grid");
    baseline->add_option("kind", base_kind, "joint or it")->required()->check(CLI::IsMember({"joint", "it"}));
    baseline->add_option("config", base_opts.config, "Experiment config (JSON)")->required();
    add_run_flags(baseline, base_opts);

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Print the summary of a results directory");
    report->add_option("results", report_dir, "Results directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) return execute(run_opts, GridOptions{});
        if (*baseline) {
            GridOptions grid;
            grid.run_methods = false;
            grid.run_joint = base_kind == "joint";
            grid.run_independent = base_kind == "it";
            return execute(base_opts, grid);
        }
        if (*validate) {
            std::ifstream in(validate_path);
            if (!in) {
                std::cerr << "cannot open " << validate_path << '\n';
                return kExitConfig;
            }
            std::stringstream ss;
            ss << in.rdbuf();
            const ConfigParse p = parse_config_text(ss.str(), fs::path(validate_path).parent_path());
            if (!p.config) {
                std::cerr << validate_path << ": " << p.errors.size() << " problem(s)\n";
                for (const auto& e : p.errors) std::cerr << "  " << e << '\n';
                return kExitConfig;
            }
            std::cout << config_to_json(*p.config).dump(2) << '\n' << "hash " << p.config->hash() << '\n';
            return kExitOk;
        }
        if (*report) {
            print_summary(load_results(report_dir));
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitGeneric;
    }
    return kExitGeneric;
}
