#pragma once

// One complete estimation pass: adaptive weights (when requested), blocked CV
// over the penalty grid, and the final fit on the full data.

#include <optional>
#include <vector>

#include "dynvar/cv.hpp"
#include "dynvar/solver.hpp"

namespace dynvar {

struct EstimationSettings {
    PenaltyConfig penalties;  // mode, exponent and exemption; penalty values come from CV
    CvConfig cv;
    SolverOptions solver;
    InitialEstimateOptions initial;
    double weight_floor = 1e-4;
};

/// Defaults used throughout: adaptive lasso, autoregressive entries of the
/// common block unpenalised.
inline EstimationSettings default_settings(int d, int p) {
    EstimationSettings s;
    s.penalties.mode = PenaltyMode::adaptive;
    s.penalties.exempt_mask = autoregressive_mask(d, p);
    return s;
}

struct Estimate {
    FitResult fit;
    CvResult cv;
    std::optional<AdaptiveWeights> weights;
};

inline std::vector<Matrix> initial_estimates(const MultiSubjectPanel& panel, const EstimationSettings& settings) {
    InitialEstimateOptions init = settings.initial;
    init.folds = settings.cv.folds;
    init.threads = settings.cv.threads;
    return initial_estimates(panel, settings.penalties, init, settings.solver);
}

/// `initial` may carry precomputed per-subject estimates so several estimators
/// on the same panel share them; it is ignored in standard mode.
inline Estimate estimate_model(const MultiSubjectPanel& panel, const SubgroupAssignment& assignment,
                               const EstimationSettings& settings,
                               const std::vector<Matrix>* initial = nullptr) {
    Estimate out;
    const AdaptiveWeights* w = nullptr;
    if (settings.penalties.mode == PenaltyMode::adaptive) {
        std::vector<Matrix> own;
        if (initial == nullptr) {
            own = initial_estimates(panel, settings);
            initial = &own;
        }
        out.weights = compute_adaptive_weights(*initial, assignment, settings.penalties.adaptive_exponent,
                                               settings.weight_floor);
        w = &*out.weights;
    }
    out.cv = cross_validate(panel, assignment, settings.cv, settings.penalties, w, settings.solver);
    out.fit = fit(make_fit_data(panel), assignment, out.cv.selected, w, settings.solver);
    return out;
}

}  // namespace dynvar
