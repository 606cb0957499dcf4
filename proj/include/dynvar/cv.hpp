#pragma once

// Blocked cross-validation over the (lambda1, alpha, lambda2) grid, and the
// per-subject lasso fits that seed the adaptive weights.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dynvar/core.hpp"
#include "dynvar/parallel.hpp"
#include "dynvar/solver.hpp"

namespace dynvar {

/// Half-open range [begin, end) of time indices.
struct FoldBlock {
    int begin = 0;
    int end = 0;
    int size() const { return end - begin; }
};

/// minimum: the grid point with the smallest CV error. one_standard_error: the
/// first grid point (largest penalties) whose error is within one standard error
/// of the minimum, the error spread taken over folds.
enum class CvRule { minimum, one_standard_error };

inline const char* to_string(CvRule r) { return r == CvRule::minimum ? "minimum" : "one_standard_error"; }

struct CvConfig {
    int folds = 5;
    CvRule rule = CvRule::minimum;
    // Explicit grids; an empty grid is filled with `grid_size` log-spaced values
    // from the block's lambda_max down to grid_ratio * lambda_max.
    std::vector<double> grid_gamma;
    std::vector<double> grid_pi;
    std::vector<double> grid_upsilon;
    int grid_size = 8;
    double grid_ratio = 1e-2;
    int threads = 1;

    void validate() const {
        if (folds < 2) throw ConfigError("folds: need F >= 2");
        if (grid_size < 1) throw ConfigError("grid_size: must be >= 1");
        if (!(grid_ratio > 0.0 && grid_ratio <= 1.0)) throw ConfigError("grid_ratio: must lie in (0, 1]");
        for (const auto* g : {&grid_gamma, &grid_pi, &grid_upsilon})
            for (double v : *g)
                if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("grid values must be finite and >= 0");
    }
};

struct FoldRecord {
    std::size_t grid_index = 0;
    int fold = 0;
    double sse = 0.0;  // summed over subjects
    bool converged = true;
    int iterations = 0;
};

struct CvResult {
    std::vector<double> grid_gamma;
    std::vector<double> grid_pi;
    std::vector<double> grid_upsilon;
    std::vector<double> mse_surface;  // flat (gamma, pi, upsilon) index; NaN where excluded
    std::vector<bool> excluded;
    std::vector<FoldRecord> per_fold_mse;
    std::size_t selected_index = 0;
    PenaltyConfig selected;
    int subjects = 0;
    int folds = 0;
    std::vector<std::string> warnings;

    std::size_t flat_index(std::size_t g, std::size_t p, std::size_t u) const {
        return (g * grid_pi.size() + p) * grid_upsilon.size() + u;
    }
    std::size_t grid_points() const { return grid_gamma.size() * grid_pi.size() * grid_upsilon.size(); }
};

/// F contiguous blocks covering [0, T); earlier blocks take the remainder.
inline std::vector<FoldBlock> make_folds(int T, int p, int F) {
    if (F < 2) throw ConfigError("folds: need F >= 2");
    if (F * (p + 1) > T)
        throw DimensionError("series of length " + std::to_string(T) + " too short for " + std::to_string(F) +
                             " folds at lag " + std::to_string(p));
    std::vector<FoldBlock> out;
    int start = 0;
    for (int f = 0; f < F; ++f) {
        const int len = T / F + (f < T % F ? 1 : 0);
        out.push_back({start, start + len});
        start += len;
    }
    return out;
}

/// `n` values from hi down to ratio * hi, equally spaced in log scale.
inline std::vector<double> log_grid(double hi, int n, double ratio) {
    if (!(hi > 0.0)) return {0.0};
    if (n == 1) return {hi};
    std::vector<double> out;
    const double lhi = std::log(hi);
    const double llo = std::log(hi * ratio);
    for (int i = 0; i < n; ++i) out.push_back(std::exp(lhi + (llo - lhi) * i / (n - 1)));
    return out;
}

namespace detail {

inline SubjectSeries slice(const SubjectSeries& s, int begin, int end) {
    SubjectSeries out;
    out.subject_id = s.subject_id;
    out.values = s.values.middleRows(begin, end - begin);
    return out;
}

// Training statistics and test forms of one fold, for every subject.
struct FoldData {
    FitData train;
    std::vector<RegressionForm> test;
};

inline FoldData build_fold(const MultiSubjectPanel& panel, int fold, int F) {
    const int d = panel.dims.d;
    const int p = panel.dims.p;
    FoldData out;
    out.train = FitData{d, p, {}};
    for (const auto& s : panel.subjects) {
        const auto blocks = make_folds(s.length(), p, F);
        const FoldBlock test = blocks[static_cast<std::size_t>(fold)];
        // Embedding stays inside each contiguous training segment, so the p
        // points right after the excised block only serve as lags.
        SubjectStats st = empty_stats(d, p);
        if (test.begin > p) st += make_stats(build_regression_form(slice(s, 0, test.begin), p));
        if (s.length() - test.end > p)
            st += make_stats(build_regression_form(slice(s, test.end, s.length()), p));
        out.train.subjects.push_back(std::move(st));
        out.test.push_back(build_regression_form(slice(s, test.begin, test.end), p));
    }
    return out;
}

}  // namespace detail

/// Fits every grid triple on F-1 blocks, scores one-step-ahead predictions on
/// the held-out block, and selects the triple with the smallest
/// (1/K) sum_k (1/F) sum_f ||Yhat_f^k - Y_f^k||^2. Ties go to the smallest flat
/// index, i.e. the largest penalties.
inline CvResult cross_validate(const MultiSubjectPanel& panel, const SubgroupAssignment& assignment,
                               const CvConfig& config, const PenaltyConfig& penalties,
                               const AdaptiveWeights* weights, const SolverOptions& options) {
    config.validate();
    penalties.validate();
    validate_panel(panel);
    const int F = config.folds;
    const std::size_t K = panel.size();
    if (!assignment.empty()) assignment.validate(K);

    CvResult res;
    res.subjects = static_cast<int>(K);
    res.folds = F;
    res.grid_gamma = config.grid_gamma;
    res.grid_pi = config.grid_pi;
    res.grid_upsilon = config.grid_upsilon;
    if (res.grid_gamma.empty() || res.grid_pi.empty() || res.grid_upsilon.empty()) {
        const FitData full = make_fit_data(panel);
        auto fill = [&](std::vector<double>& grid, Block b, bool active) {
            if (!grid.empty()) return;
            if (!active) {
                grid = {0.0};
                return;
            }
            grid = log_grid(lambda_max(full, assignment, b, penalties, weights, options), config.grid_size,
                            config.grid_ratio);
        };
        fill(res.grid_gamma, Block::gamma, options.fit_gamma);
        fill(res.grid_pi, Block::pi, options.fit_pi && assignment.S > 0);
        fill(res.grid_upsilon, Block::upsilon, options.fit_upsilon);
    }

    const std::size_t ng = res.grid_gamma.size();
    const std::size_t np = res.grid_pi.size();
    const std::size_t nu = res.grid_upsilon.size();
    const std::size_t n_points = ng * np * nu;

    std::vector<std::vector<FoldRecord>> records(static_cast<std::size_t>(F));
    parallel_for(static_cast<std::size_t>(F), config.threads, [&](std::size_t f) {
        const detail::FoldData fd = detail::build_fold(panel, static_cast<int>(f), F);
        auto& rec = records[f];
        rec.resize(n_points);
        TransitionDecomposition prev, row_start, plane_start;
        for (std::size_t g = 0; g < ng; ++g)
            for (std::size_t pi = 0; pi < np; ++pi)
                for (std::size_t u = 0; u < nu; ++u) {
                    PenaltyConfig pen = penalties;
                    pen.lambda1 = res.grid_gamma[g];
                    pen.alpha_s = res.grid_pi[pi];
                    pen.lambda2 = res.grid_upsilon[u];
                    const TransitionDecomposition* warm = nullptr;
                    if (u > 0)
                        warm = &prev;
                    else if (pi > 0)
                        warm = &row_start;
                    else if (g > 0)
                        warm = &plane_start;
                    FitResult fitres = fit(fd.train, assignment, pen, weights, options, warm);
                    double sse = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        const auto& test = fd.test[k];
                        if (test.samples() == 0) continue;
                        sse += (test.Y - compose_transition(fitres.decomposition, k) * test.Z).squaredNorm();
                    }
                    const std::size_t idx = (g * np + pi) * nu + u;
                    rec[idx] = FoldRecord{idx, static_cast<int>(f), sse, fitres.converged, fitres.iterations};
                    prev = fitres.decomposition;
                    if (u == 0) {
                        row_start = prev;
                        if (pi == 0) plane_start = prev;
                    }
                }
    });

    res.mse_surface.assign(n_points, 0.0);
    res.excluded.assign(n_points, false);
    for (std::size_t f = 0; f < static_cast<std::size_t>(F); ++f)
        for (std::size_t i = 0; i < n_points; ++i) {
            const auto& r = records[f][i];
            res.mse_surface[i] += r.sse;
            if (!r.converged) res.excluded[i] = true;
            res.per_fold_mse.push_back(r);
        }
    double best = std::numeric_limits<double>::infinity();
    bool found = false;
    for (std::size_t i = 0; i < n_points; ++i) {
        res.mse_surface[i] /= static_cast<double>(K) * static_cast<double>(F);
        if (res.excluded[i]) {
            res.warnings.push_back("grid point " + std::to_string(i) +
                                   " excluded: a fold fit did not converge");
            res.mse_surface[i] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        if (res.mse_surface[i] < best) {
            best = res.mse_surface[i];
            res.selected_index = i;
            found = true;
        }
    }
    if (!found) throw ConvergenceError("cross-validation: no grid point converged on every fold");
    if (config.rule == CvRule::one_standard_error && F > 1) {
        double mean = 0.0, ss = 0.0;
        for (std::size_t f = 0; f < static_cast<std::size_t>(F); ++f)
            mean += records[f][res.selected_index].sse / static_cast<double>(K);
        mean /= F;
        for (std::size_t f = 0; f < static_cast<std::size_t>(F); ++f) {
            const double e = records[f][res.selected_index].sse / static_cast<double>(K) - mean;
            ss += e * e;
        }
        const double se = std::sqrt(ss / (F - 1) / F);
        for (std::size_t i = 0; i < n_points; ++i)
            if (!res.excluded[i] && res.mse_surface[i] <= best + se) {
                res.selected_index = i;
                break;
            }
    }
    const std::size_t u = res.selected_index % nu;
    const std::size_t pi = (res.selected_index / nu) % np;
    const std::size_t g = res.selected_index / (nu * np);
    res.selected = penalties;
    res.selected.lambda1 = res.grid_gamma[g];
    res.selected.alpha_s = res.grid_pi[pi];
    res.selected.lambda2 = res.grid_upsilon[u];
    return res;
}

struct InitialEstimateOptions {
    int folds = 5;
    CvRule rule = CvRule::one_standard_error;
    int grid_size = 20;
    double grid_ratio = 1e-3;
    int threads = 1;
};

/// Per-subject lasso VAR fits, each with its own blocked-CV penalty. These are
/// the initial estimates behind the adaptive weights.
inline std::vector<Matrix> initial_estimates(const MultiSubjectPanel& panel, const PenaltyConfig& penalties,
                                             const InitialEstimateOptions& init, const SolverOptions& options) {
    validate_panel(panel);
    std::vector<Matrix> out(panel.size());
    parallel_for(panel.size(), init.threads, [&](std::size_t k) {
        MultiSubjectPanel single;
        single.dims = panel.dims;
        single.dims.K = 1;
        single.dims.T = panel.subjects[k].length();
        single.subjects = {panel.subjects[k]};
        single.centered = panel.centered;

        PenaltyConfig pen;
        pen.mode = PenaltyMode::standard;
        pen.exempt_mask = penalties.exempt_mask;
        SolverOptions opt = options;
        opt.fit_gamma = true;
        opt.fit_pi = false;
        opt.fit_upsilon = false;
        CvConfig cfg;
        cfg.folds = init.folds;
        cfg.rule = init.rule;
        cfg.grid_size = init.grid_size;
        cfg.grid_ratio = init.grid_ratio;
        const CvResult cv = cross_validate(single, {}, cfg, pen, nullptr, opt);
        const FitResult f = fit(make_fit_data(single), {}, cv.selected, nullptr, opt);
        out[k] = f.decomposition.gamma;
    });
    return out;
}

}  // namespace dynvar
