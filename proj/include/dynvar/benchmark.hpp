#pragma once

// Monte Carlo harness: a factorial grid of (K, T, S, balance) cells, R seeded
// replications per cell, three estimators per replication, and aggregate
// tables of means with Monte Carlo errors.

#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dynvar/io.hpp"
#include "dynvar/metrics.hpp"
#include "dynvar/parallel.hpp"
#include "dynvar/pipeline.hpp"
#include "dynvar/simulate.hpp"

namespace dynvar {

struct BenchmarkCell {
    int K = 50;
    int T = 100;
    int S = 2;
    Balance balance = Balance::balanced;

    /// Time first, then subjects.
    std::string label() const {
        return "T=" + std::to_string(T) + "/K=" + std::to_string(K) + "/S=" + std::to_string(S) + "/" +
               to_string(balance);
    }
};

struct BenchmarkDesign {
    std::vector<int> subjects{50, 100};
    std::vector<int> times{50, 100};
    std::vector<int> subgroups{2, 3};
    std::vector<Balance> balances{Balance::balanced, Balance::unbalanced};
    int replications = 10;  // 50 for the full study
    int d = 10;
    std::uint64_t seed = 1;
    int threads = 1;
    RunConfig run;  // estimation settings shared by all estimators

    void validate() const {
        if (replications < 1) throw ConfigError("replications: need R >= 1");
        if (subjects.empty() || times.empty() || subgroups.empty() || balances.empty())
            throw ConfigError("every design factor needs at least one level");
        if (d < 2) throw ConfigError("variables: need d >= 2");
        run.cv.validate();
        run.solver.validate();
    }

    std::vector<BenchmarkCell> cells() const {
        std::vector<BenchmarkCell> out;
        for (int T : times)
            for (int K : subjects)
                for (int S : subgroups)
                    for (Balance b : balances) out.push_back({K, T, S, b});
        return out;
    }
};

inline Balance parse_balance(const std::string& s) {
    if (s == "balanced") return Balance::balanced;
    if (s == "unbalanced") return Balance::unbalanced;
    throw ConfigError("balance: expected balanced|unbalanced, got '" + s + "'");
}

/// Reads the design factors and then the run settings from the same file.
inline BenchmarkDesign benchmark_design_from(KeyValueConfig& kv, bool reduced = true) {
    BenchmarkDesign b;
    auto ints = [&](const std::string& key, std::vector<int>& target) {
        if (!kv.has(key)) return;
        target.clear();
        for (double v : kv.get_doubles(key)) {
            if (v != std::floor(v)) throw ConfigError(key + ": expected integers");
            target.push_back(static_cast<int>(v));
        }
    };
    ints("subjects", b.subjects);
    ints("times", b.times);
    ints("subgroups", b.subgroups);
    if (kv.has("balance")) {
        b.balances.clear();
        for (const auto& s : kv.get_strings("balance")) b.balances.push_back(parse_balance(s));
    }
    b.replications = static_cast<int>(kv.get_int("replications", reduced ? 10 : 50));
    b.d = static_cast<int>(kv.get_int("variables", b.d));
    b.run = run_config_from(kv);
    b.seed = b.run.seed;
    b.threads = b.run.cv.threads;
    b.run.cv.threads = 1;
    b.validate();
    return b;
}

inline const std::vector<std::string>& estimator_names() {
    static const std::vector<std::string> names{"subgrouping", "confirmatory", "standard"};
    return names;
}

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"sensitivity", "specificity", "mcc", "bias", "rmse", "ari"};
    return names;
}

struct ReplicationRecord {
    std::size_t cell = 0;
    int replication = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    int detected_S = 0;
    // estimator -> metric -> value (NaN when not applicable)
    std::map<std::string, std::map<std::string, double>> values;
};

inline std::uint64_t replication_seed(std::uint64_t base, std::size_t cell, int rep) {
    return derive_seed(derive_seed(base, cell), static_cast<std::uint64_t>(rep));
}

namespace detail {

inline std::map<std::string, double> metric_row(const MetricsReport& m) {
    return {{"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"mcc", m.mcc},
            {"bias", m.absolute_bias},      {"rmse", m.rmse},               {"ari", m.ari}};
}

}  // namespace detail

/// simulate -> shared initial estimates -> detection -> subgrouping fit ->
/// confirmatory fit -> standard fit -> metrics for all three.
inline ReplicationRecord run_replication(const BenchmarkDesign& design, const BenchmarkCell& cell,
                                         std::size_t cell_index, int rep) {
    ReplicationRecord rec;
    rec.cell = cell_index;
    rec.replication = rep;
    rec.seed = replication_seed(design.seed, cell_index, rep);
    try {
        SimulationDesign sim;
        sim.dims = {design.d, cell.T, cell.K, 1};
        sim.S = cell.S;
        sim.balance = cell.balance;
        sim.seed = rec.seed;
        const GeneratedDataset data = generate_dataset(sim);
        const MultiSubjectPanel panel = preprocess(data.panel);
        const EstimationSettings settings = design.run.estimation(design.d, 1);
        const std::vector<Matrix> truth = compose_all(data.truth);

        std::vector<Matrix> initial;
        const std::vector<Matrix>* init_ptr = nullptr;
        if (settings.penalties.mode == PenaltyMode::adaptive) {
            initial = initial_estimates(panel, settings);
            init_ptr = &initial;
        }
        const DetectionSettings det = design.run.detection(design.d, 1);
        const Detection detection = detect_subgroups(panel, det, init_ptr);
        rec.detected_S = detection.assignment.S;
        const Estimate subgrouping = estimate_model(panel, detection.assignment, settings, init_ptr);
        // Detection that reproduces the true labels makes the confirmatory fit identical.
        const bool same = detection.assignment.S == data.true_assignment.S &&
                          detection.assignment.labels == data.true_assignment.labels;
        const Estimate confirmatory =
            same ? subgrouping : estimate_model(panel, data.true_assignment, settings, init_ptr);

        // The detection fit is the standard estimator only when it ran on the same grid.
        const bool reuse = det.estimation.cv.grid_ratio == settings.cv.grid_ratio;
        const Estimate standard = reuse ? detection.standard : estimate_model(panel, {}, settings, init_ptr);

        rec.values["standard"] = detail::metric_row(evaluate(compose_all(standard.fit.decomposition), truth));
        rec.values["subgrouping"] = detail::metric_row(evaluate(compose_all(subgrouping.fit.decomposition), truth,
                                                                &detection.assignment, &data.true_assignment));
        rec.values["confirmatory"] = detail::metric_row(evaluate(compose_all(confirmatory.fit.decomposition), truth));
        rec.ok = true;
    } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

struct SummaryRow {
    std::string condition;
    std::string estimator;
    std::string metric;
    double value = std::nan("");
    double mce = std::nan("");
    int n = 0;
};

struct BenchmarkResult {
    std::vector<BenchmarkCell> cells;
    std::vector<ReplicationRecord> records;  // ordered by (cell, replication)
    std::vector<SummaryRow> summary;
    std::vector<std::string> flagged;  // cells with more than 20% failed replications
};

inline std::vector<SummaryRow> summarize(const std::vector<BenchmarkCell>& cells,
                                         const std::vector<ReplicationRecord>& records) {
    std::vector<SummaryRow> out;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (const auto& est : estimator_names())
            for (const auto& metric : metric_names()) {
                std::vector<double> vals;
                for (const auto& r : records) {
                    if (r.cell != c || !r.ok) continue;
                    const double v = r.values.at(est).at(metric);
                    if (!std::isnan(v)) vals.push_back(v);
                }
                if (vals.empty()) continue;
                SummaryRow row{cells[c].label(), est, metric};
                double sum = 0.0;
                for (double v : vals) sum += v;
                row.value = sum / static_cast<double>(vals.size());
                if (vals.size() >= 2) row.mce = monte_carlo_error(vals);
                row.n = static_cast<int>(vals.size());
                out.push_back(row);
            }
    return out;
}

/// Runs every (cell, replication) job; results are assembled by index, so
/// thread count and completion order never change the output.
inline BenchmarkResult run_benchmark(const BenchmarkDesign& design) {
    design.validate();
    BenchmarkResult res;
    res.cells = design.cells();
    const std::size_t R = static_cast<std::size_t>(design.replications);
    res.records.resize(res.cells.size() * R);
    parallel_for(res.records.size(), design.threads, [&](std::size_t job) {
        const std::size_t c = job / R;
        const int rep = static_cast<int>(job % R);
        res.records[job] = run_replication(design, res.cells[c], c, rep);
    });
    res.summary = summarize(res.cells, res.records);
    for (std::size_t c = 0; c < res.cells.size(); ++c) {
        std::size_t failed = 0;
        for (std::size_t r = 0; r < R; ++r) failed += res.records[c * R + r].ok ? 0 : 1;
        if (static_cast<double>(failed) > 0.2 * static_cast<double>(R))
            res.flagged.push_back(res.cells[c].label() + ": " + std::to_string(failed) + " of " + std::to_string(R) +
                                  " replications failed");
    }
    return res;
}

namespace detail {

inline std::string fixed6(double v) {
    if (std::isnan(v)) return "NA";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string mean_mce(double v, double mce) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    if (std::isnan(mce))
        std::snprintf(buf, sizeof buf, "%.2f", v);
    else
        std::snprintf(buf, sizeof buf, "%.2f (%.2f)", v, mce);
    return buf;
}

}  // namespace detail

/// records.csv, summary.csv, table_support.csv (sensitivity/specificity),
/// table_recovery.csv (MCC/ARI), table_quality.csv (bias/RMSE), flagged.txt.
inline void write_benchmark(const fs::path& dir, const BenchmarkResult& res) {
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "records.csv", std::ios::binary);
        if (!out) throw IoError("cannot write records.csv in " + dir.string());
        out << "condition,replication,seed,ok,detected_S,estimator,metric,value,error\n";
        for (const auto& r : res.records) {
            const std::string cond = res.cells[r.cell].label();
            if (!r.ok) {
                std::string err = r.error;
                for (auto& ch : err)
                    if (ch == ',' || ch == '\n') ch = ';';
                out << cond << ',' << r.replication << ',' << r.seed << ",0,,,,," << err << '\n';
                continue;
            }
            for (const auto& est : estimator_names())
                for (const auto& metric : metric_names())
                    out << cond << ',' << r.replication << ',' << r.seed << ",1," << r.detected_S << ',' << est << ','
                        << metric << ',' << format_double(r.values.at(est).at(metric)) << ",\n";
        }
    }
    {
        std::ofstream out(dir / "summary.csv", std::ios::binary);
        if (!out) throw IoError("cannot write summary.csv in " + dir.string());
        out << "condition,estimator,metric,value,mce\n";
        for (const auto& s : res.summary)
            out << s.condition << ',' << s.estimator << ',' << s.metric << ',' << detail::fixed6(s.value) << ','
                << detail::fixed6(s.mce) << '\n';
    }
    auto table = [&](const std::string& file, const std::vector<std::string>& metrics) {
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw IoError("cannot write " + file);
        out << "T,K,S,balance,estimator";
        for (const auto& m : metrics) out << ',' << m;
        out << '\n';
        for (const auto& cell : res.cells)
            for (const auto& est : estimator_names()) {
                out << cell.T << ',' << cell.K << ',' << cell.S << ',' << to_string(cell.balance) << ',' << est;
                for (const auto& m : metrics) {
                    std::string v = "NA";
                    for (const auto& s : res.summary)
                        if (s.condition == cell.label() && s.estimator == est && s.metric == m)
                            v = detail::mean_mce(s.value, s.mce);
                    out << ',' << v;
                }
                out << '\n';
            }
    };
    table("table_support.csv", {"sensitivity", "specificity"});
    table("table_recovery.csv", {"mcc", "ari"});
    table("table_quality.csv", {"bias", "rmse"});
    std::ofstream flagged(dir / "flagged.txt", std::ios::binary);
    for (const auto& f : res.flagged) flagged << f << '\n';
}

}  // namespace dynvar
