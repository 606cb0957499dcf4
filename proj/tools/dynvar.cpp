// dynvar command-line front end: simulate, fit, evaluate, benchmark.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dynvar/benchmark.hpp"
#include "dynvar/io.hpp"
#include "dynvar/metrics.hpp"
#include "dynvar/pipeline.hpp"
#include "dynvar/simulate.hpp"

namespace {

using namespace dynvar;

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kConvergence = 4 };

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<std::string> penalty;
    std::optional<int> folds;
    std::optional<int> grid_size;
    std::optional<int> threads;

    void apply(RunConfig& c) const {
        if (seed) c.seed = *seed;
        if (mode) c.mode = parse_mode(*mode);
        if (penalty) c.penalty = parse_penalty_mode(*penalty);
        if (folds) c.cv.folds = *folds;
        if (grid_size) c.cv.grid_size = *grid_size;
        if (auto n = thread_count()) c.cv.threads = *n;
    }

    // --threads wins over DYNVAR_THREADS; neither leaves the config value.
    std::optional<int> thread_count() const {
        if (threads) return threads;
        if (std::getenv("DYNVAR_THREADS") != nullptr) return threads_from_env();
        return std::nullopt;
    }
};

KeyValueConfig load_or_default(const std::string& path) {
    if (path.empty()) return KeyValueConfig::parse("version = 1\n", "defaults");
    return KeyValueConfig::load(path);
}

SimulationDesign simulation_design_from(KeyValueConfig& kv) {
    SimulationDesign s;
    s.dims.d = static_cast<int>(kv.get_int("variables", s.dims.d));
    s.dims.K = static_cast<int>(kv.get_int("subjects", s.dims.K));
    s.dims.T = static_cast<int>(kv.get_int("time", s.dims.T));
    s.dims.p = static_cast<int>(kv.get_int("lag", s.dims.p));
    s.S = static_cast<int>(kv.get_int("subgroups", s.S));
    s.balance = parse_balance(kv.get_string("balance", to_string(s.balance)));
    s.subgroup_density = kv.get_double("subgroup_density", s.subgroup_density);
    s.unique_density = kv.get_double("unique_density", s.unique_density);
    s.burn_in = static_cast<int>(kv.get_int("burn_in", s.burn_in));
    s.max_redraws = static_cast<int>(kv.get_int("max_redraws", s.max_redraws));
    s.seed = kv.get_uint64("seed", s.seed);
    kv.finish();
    s.validate();
    return s;
}

int cmd_simulate(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
    auto kv = load_or_default(config);
    SimulationDesign design = simulation_design_from(kv);
    if (seed) design.seed = *seed;
    const GeneratedDataset data = generate_dataset(design);
    const fs::path dir(out);
    save_panel(dir, data.panel);
    std::vector<std::string> ids;
    for (const auto& s : data.panel.subjects) ids.push_back(s.subject_id);
    save_decomposition(dir / "truth", data.truth, ids);
    write_json(dir / "assignment.json", to_json(data.true_assignment));
    std::cout << "wrote " << data.panel.size() << " subjects to " << dir.string() << "\n";
    return kOk;
}

int cmd_fit(const std::string& manifest, const std::string& config, const std::string& out, const Overrides& ov) {
    auto kv = load_or_default(config);
    const fs::path base = config.empty() ? fs::path() : fs::path(config).parent_path();
    RunConfig rc = run_config_from(kv, base);
    ov.apply(rc);
    const MultiSubjectPanel panel = load_panel(manifest);
    const AnalysisResult res = run_analysis(panel, rc);
    save_results(out, res, rc);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "mode=" << to_string(res.mode) << " S=" << res.assignment.S
              << " lambda1=" << format_double(res.estimate.cv.selected.lambda1)
              << " alpha=" << format_double(res.estimate.cv.selected.alpha_s)
              << " lambda2=" << format_double(res.estimate.cv.selected.lambda2) << "\n";
    if (!res.estimate.fit.converged) {
        std::cerr << "error: final fit did not converge within " << rc.solver.max_iterations
                  << " iterations (KKT residual " << format_double(res.estimate.fit.kkt_residual) << ")\n";
        return kConvergence;
    }
    return kOk;
}

int cmd_evaluate(const std::string& results, const std::string& truth, const std::string& out) {
    const auto est = load_decomposition(results);
    const auto tru = load_decomposition(truth);
    if (est.subject_ids != tru.subject_ids) throw DimensionError("results and truth list different subjects");
    const auto est_phi = compose_all(est.decomposition);
    const auto true_phi = compose_all(tru.decomposition);
    const SubgroupAssignment* ea = est.decomposition.assignment.empty() ? nullptr : &est.decomposition.assignment;
    const SubgroupAssignment* ta = tru.decomposition.assignment.empty() ? nullptr : &tru.decomposition.assignment;
    const MetricsReport m = evaluate(est_phi, true_phi, ea, ta);

    std::string estimator = "estimate";
    if (fs::exists(fs::path(results) / "results.json"))
        estimator = read_json(fs::path(results) / "results.json").value("mode", estimator);

    auto num = [](double v) { return std::isnan(v) ? Json(nullptr) : Json(v); };
    Json j;
    j["sensitivity"] = num(m.sensitivity);
    j["specificity"] = num(m.specificity);
    j["mcc"] = num(m.mcc);
    j["bias"] = num(m.absolute_bias);
    j["rmse"] = num(m.rmse);
    j["ari"] = num(m.ari);
    j["estimator"] = estimator;
    j["warnings"] = m.warnings;
    const fs::path dir = out.empty() ? fs::path(results) : fs::path(out);
    write_json(dir / "metrics.json", j);
    std::ofstream csv(dir / "metrics.csv", std::ios::binary);
    csv << "condition,estimator,metric,value,mce\n";
    const std::pair<const char*, double> rows[] = {{"sensitivity", m.sensitivity}, {"specificity", m.specificity},
                                                   {"mcc", m.mcc},                 {"bias", m.absolute_bias},
                                                   {"rmse", m.rmse},               {"ari", m.ari}};
    for (const auto& [name, v] : rows) csv << "single," << estimator << ',' << name << ',' << format_double(v) << ",NA\n";
    std::cout << j.dump(2) << "\n";
    return kOk;
}

int cmd_benchmark(const std::string& config, const std::string& out, bool full, std::optional<int> replications,
                  const Overrides& ov) {
    auto kv = load_or_default(config);
    BenchmarkDesign design = benchmark_design_from(kv, !full);
    if (replications) design.replications = *replications;
    ov.apply(design.run);
    design.seed = design.run.seed;
    if (auto n = ov.thread_count()) design.threads = *n;
    design.run.cv.threads = 1;
    design.validate();
    const BenchmarkResult res = run_benchmark(design);
    write_benchmark(out, res);
    for (const auto& f : res.flagged) std::cerr << "flagged: " << f << "\n";
    std::cout << "ran " << res.records.size() << " replications over " << res.cells.size() << " cells; tables in "
              << out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-subject sparse VAR with data-driven subgroups"};
    app.require_subcommand(1);

    std::string config, manifest, out, results, truth;
    Overrides ov;
    bool reduced = false, full = false;
    std::optional<int> replications;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "key = value configuration file");
        sub->add_option("--seed", ov.seed, "base seed");
    };
    auto add_estimation = [&](CLI::App* sub) {
        sub->add_option("--mode", ov.mode, "standard | subgrouping | confirmatory");
        sub->add_option("--penalty", ov.penalty, "standard | adaptive");
        sub->add_option("--folds", ov.folds, "cross-validation folds");
        sub->add_option("--grid-size", ov.grid_size, "penalty values per grid axis");
        sub->add_option("--threads", ov.threads, "worker threads (default: DYNVAR_THREADS or 1)");
    };

    auto* sim = app.add_subcommand("simulate", "generate a dataset from the factorial design");
    add_common(sim);
    sim->add_option("--out", out, "output directory")->required();

    auto* fit = app.add_subcommand("fit", "estimate a model for a panel");
    add_common(fit);
    add_estimation(fit);
    fit->add_option("--manifest", manifest, "panel manifest JSON")->required();
    fit->add_option("--out", out, "results directory")->required();

    auto* eval = app.add_subcommand("evaluate", "score a results bundle against the truth");
    eval->add_option("--results", results, "results directory from fit")->required();
    eval->add_option("--truth", truth, "truth directory from simulate")->required();
    eval->add_option("--out", out, "where to write metrics (default: the results directory)");

    auto* bench = app.add_subcommand("benchmark", "run the Monte Carlo study");
    add_common(bench);
    add_estimation(bench);
    bench->add_option("--out", out, "output directory")->required();
    bench->add_flag("--reduced", reduced, "desk scale: R = 10 unless the config says otherwise (default)");
    bench->add_flag("--full", full, "full scale: R = 50 unless the config says otherwise");
    bench->add_option("--replications", replications, "override R");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*sim) return cmd_simulate(config, out, ov.seed);
        if (*fit) return cmd_fit(manifest, config, out, ov);
        if (*eval) return cmd_evaluate(results, truth, out);
        if (*bench) {
            if (reduced && full) throw ConfigError("--reduced and --full are mutually exclusive");
            return cmd_benchmark(config, out, full, replications, ov);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const ConvergenceError& e) {
        std::cerr << "convergence error: " << e.what() << "\n";
        return kConvergence;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
