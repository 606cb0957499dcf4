#pragma once

// End-to-end analysis of one panel: preprocessing, optional subgroup
// detection, adaptive weights, CV and the final fit, plus the results bundle.

#include <optional>
#include <string>
#include <vector>

#include "dynvar/estimate.hpp"
#include "dynvar/io.hpp"
#include "dynvar/subgrouping.hpp"

namespace dynvar {

enum class AnalysisMode { standard, subgrouping, confirmatory };

inline const char* to_string(AnalysisMode m) {
    switch (m) {
        case AnalysisMode::standard: return "standard";
        case AnalysisMode::subgrouping: return "subgrouping";
        case AnalysisMode::confirmatory: return "confirmatory";
    }
    return "standard";
}

inline AnalysisMode parse_mode(const std::string& s) {
    if (s == "standard") return AnalysisMode::standard;
    if (s == "subgrouping") return AnalysisMode::subgrouping;
    if (s == "confirmatory") return AnalysisMode::confirmatory;
    throw ConfigError("mode: expected standard|subgrouping|confirmatory, got '" + s + "'");
}

inline const char* to_string(PenaltyMode m) { return m == PenaltyMode::adaptive ? "adaptive" : "standard"; }

inline PenaltyMode parse_penalty_mode(const std::string& s) {
    if (s == "standard") return PenaltyMode::standard;
    if (s == "adaptive") return PenaltyMode::adaptive;
    throw ConfigError("penalty: expected standard|adaptive, got '" + s + "'");
}

struct RunConfig {
    AnalysisMode mode = AnalysisMode::subgrouping;
    PenaltyMode penalty = PenaltyMode::adaptive;
    CvConfig cv;
    SolverOptions solver;
    InitialEstimateOptions initial;
    double weight_floor = 1e-4;
    double adaptive_exponent = 1.0;
    bool exempt_autoregressive = true;
    bool exempt_all_blocks = false;
    int walk_length = 4;
    // Grid floor for the two-level fit behind detection; the final fit uses cv.grid_ratio.
    double detection_grid_ratio = 1e-3;
    std::uint64_t seed = 1;
    std::optional<SubgroupAssignment> known_assignment;

    void validate() const {
        cv.validate();
        solver.validate();
        if (walk_length < 1) throw ConfigError("walk_length: must be >= 1");
        if (!(detection_grid_ratio > 0.0 && detection_grid_ratio <= 1.0))
            throw ConfigError("detection_grid_ratio: must lie in (0, 1]");
        if (!(weight_floor > 0.0)) throw ConfigError("weight_floor: must be > 0");
        if (!(adaptive_exponent >= 1.0)) throw ConfigError("adaptive_exponent: must be >= 1");
        if (mode == AnalysisMode::confirmatory && !known_assignment)
            throw ConfigError("known_assignment: required in confirmatory mode");
    }

    EstimationSettings estimation(int d, int p) const {
        EstimationSettings s;
        s.penalties.mode = penalty;
        s.penalties.adaptive_exponent = adaptive_exponent;
        s.penalties.exempt_all_blocks = exempt_all_blocks;
        if (exempt_autoregressive) s.penalties.exempt_mask = autoregressive_mask(d, p);
        s.cv = cv;
        s.solver = solver;
        s.initial = initial;
        s.weight_floor = weight_floor;
        return s;
    }

    DetectionSettings detection(int d, int p) const {
        DetectionSettings s;
        s.estimation = estimation(d, p);
        s.estimation.cv.grid_ratio = detection_grid_ratio;
        s.walk_length = walk_length;
        return s;
    }
};

/// Reads a run config; relative paths (known_assignment) resolve against
/// `base_dir`.
inline RunConfig run_config_from(KeyValueConfig& kv, const fs::path& base_dir = {}) {
    RunConfig c;
    c.mode = parse_mode(kv.get_string("mode", to_string(c.mode)));
    c.penalty = parse_penalty_mode(kv.get_string("penalty", to_string(c.penalty)));
    c.cv.folds = static_cast<int>(kv.get_int("folds", c.cv.folds));
    c.cv.grid_size = static_cast<int>(kv.get_int("grid_size", c.cv.grid_size));
    c.cv.grid_ratio = kv.get_double("grid_ratio", c.cv.grid_ratio);
    c.cv.grid_gamma = kv.get_doubles("grid_gamma");
    c.cv.grid_pi = kv.get_doubles("grid_pi");
    c.cv.grid_upsilon = kv.get_doubles("grid_upsilon");
    c.cv.threads = static_cast<int>(kv.get_int("threads", c.cv.threads));
    c.solver.max_iterations = static_cast<int>(kv.get_int("max_iterations", c.solver.max_iterations));
    c.solver.tolerance = kv.get_double("tolerance", c.solver.tolerance);
    c.solver.kkt_tolerance = kv.get_double("kkt_tolerance", c.solver.kkt_tolerance);
    c.solver.initial_step = kv.get_double("initial_step", c.solver.initial_step);
    const std::string rule = kv.get_string("step_rule", "backtracking");
    if (rule == "backtracking")
        c.solver.step_rule = StepRule::backtracking;
    else if (rule == "fixed_lipschitz")
        c.solver.step_rule = StepRule::fixed_lipschitz;
    else
        throw ConfigError("step_rule: expected backtracking|fixed_lipschitz, got '" + rule + "'");
    c.initial.grid_size = static_cast<int>(kv.get_int("initial_grid_size", c.initial.grid_size));
    c.initial.grid_ratio = kv.get_double("initial_grid_ratio", c.initial.grid_ratio);
    const std::string init_rule = kv.get_string("initial_cv_rule", to_string(c.initial.rule));
    if (init_rule == "minimum")
        c.initial.rule = CvRule::minimum;
    else if (init_rule == "one_standard_error")
        c.initial.rule = CvRule::one_standard_error;
    else
        throw ConfigError("initial_cv_rule: expected minimum|one_standard_error, got '" + init_rule + "'");
    c.weight_floor = kv.get_double("weight_floor", c.weight_floor);
    c.adaptive_exponent = kv.get_double("adaptive_exponent", c.adaptive_exponent);
    c.exempt_autoregressive = kv.get_bool("exempt_autoregressive", c.exempt_autoregressive);
    c.exempt_all_blocks = kv.get_bool("exempt_all_blocks", c.exempt_all_blocks);
    c.walk_length = static_cast<int>(kv.get_int("walk_length", c.walk_length));
    c.detection_grid_ratio = kv.get_double("detection_grid_ratio", c.detection_grid_ratio);
    c.seed = kv.get_uint64("seed", c.seed);
    const std::string known = kv.get_string("known_assignment", "");
    if (!known.empty()) {
        const fs::path p = fs::path(known).is_absolute() ? fs::path(known) : base_dir / known;
        c.known_assignment = read_assignment(p);
    }
    kv.finish();
    return c;
}

struct AnalysisResult {
    AnalysisMode mode = AnalysisMode::standard;
    Estimate estimate;
    std::optional<Detection> detection;
    SubgroupAssignment assignment;  // S=0 in standard mode
    std::vector<bool> singleton;
    std::vector<std::string> subject_ids;
    std::vector<std::string> warnings;
};

/// Imputes and centres the panel unless it is already centred.
inline MultiSubjectPanel preprocess(MultiSubjectPanel panel) {
    panel = impute_panel(std::move(panel));
    if (!panel.centered) panel = center_panel(std::move(panel));
    return panel;
}

inline AnalysisResult run_analysis(const MultiSubjectPanel& raw, const RunConfig& config) {
    config.validate();
    const MultiSubjectPanel panel = preprocess(raw);
    const EstimationSettings settings = config.estimation(panel.dims.d, panel.dims.p);
    AnalysisResult out;
    out.mode = config.mode;
    for (const auto& s : panel.subjects) out.subject_ids.push_back(s.subject_id);

    std::vector<Matrix> initial;
    const std::vector<Matrix>* init_ptr = nullptr;
    if (settings.penalties.mode == PenaltyMode::adaptive) {
        initial = initial_estimates(panel, settings);
        init_ptr = &initial;
    }

    switch (config.mode) {
        case AnalysisMode::standard:
            out.estimate = estimate_model(panel, {}, settings, init_ptr);
            break;
        case AnalysisMode::subgrouping: {
            out.detection = detect_subgroups(panel, config.detection(panel.dims.d, panel.dims.p), init_ptr);
            out.assignment = out.detection->assignment;
            out.singleton = out.detection->singleton;
            for (std::size_t s = 0; s < out.singleton.size(); ++s)
                if (out.singleton[s]) out.warnings.push_back("subgroup " + std::to_string(s + 1) + " is a singleton");
            out.estimate = estimate_model(panel, out.assignment, settings, init_ptr);
            break;
        }
        case AnalysisMode::confirmatory:
            config.known_assignment->validate(panel.size());
            out.assignment = *config.known_assignment;
            for (auto n : out.assignment.sizes()) out.singleton.push_back(n == 1);
            out.estimate = estimate_model(panel, out.assignment, settings, init_ptr);
            break;
    }
    for (const auto& w : out.estimate.cv.warnings) out.warnings.push_back("cv: " + w);
    if (!out.estimate.fit.converged)
        out.warnings.push_back("final fit did not converge (KKT residual " + format_double(out.estimate.fit.kkt_residual) + ")");
    return out;
}

inline Json results_json(const AnalysisResult& r, const RunConfig& config) {
    const auto& cv = r.estimate.cv;
    Json j;
    j["version"] = 1;
    j["mode"] = to_string(r.mode);
    j["penalty"] = to_string(config.penalty);
    if (config.penalty == PenaltyMode::adaptive) j["initial_cv_rule"] = to_string(config.initial.rule);
    j["seed"] = config.seed;
    j["subjects"] = r.subject_ids;
    j["assignment"] = to_json(r.assignment);
    j["singleton"] = r.singleton;
    j["selected"] = {{"lambda1", cv.selected.lambda1}, {"alpha", cv.selected.alpha_s}, {"lambda2", cv.selected.lambda2}};
    Json surface = Json::array();
    for (std::size_t i = 0; i < cv.mse_surface.size(); ++i)
        surface.push_back(cv.excluded[i] ? Json(nullptr) : Json(cv.mse_surface[i]));
    j["cv"] = {{"folds", cv.folds},
               {"grid_gamma", cv.grid_gamma},
               {"grid_pi", cv.grid_pi},
               {"grid_upsilon", cv.grid_upsilon},
               {"mse_surface", surface},
               {"selected_index", cv.selected_index}};
    j["convergence"] = {{"converged", r.estimate.fit.converged},
                        {"iterations", r.estimate.fit.iterations},
                        {"kkt_residual", r.estimate.fit.kkt_residual},
                        {"objective", r.estimate.fit.objective_trace.empty() ? 0.0 : r.estimate.fit.objective_trace.back()}};
    if (r.detection) {
        j["detection"] = {{"modularity", r.detection->partition.modularity},
                          {"grid_ratio", config.detection_grid_ratio},
                          {"similarity", Json::array()}};
        auto& sim = j["detection"]["similarity"];
        const auto& c = r.detection->similarity.counts;
        for (Eigen::Index i = 0; i < c.rows(); ++i) {
            std::vector<int> row(static_cast<std::size_t>(c.cols()));
            for (Eigen::Index k = 0; k < c.cols(); ++k) row[static_cast<std::size_t>(k)] = c(i, k);
            sim.push_back(row);
        }
    }
    j["warnings"] = r.warnings;
    return j;
}

/// Decomposition CSVs plus results.json.
inline void save_results(const fs::path& dir, const AnalysisResult& r, const RunConfig& config) {
    save_decomposition(dir, r.estimate.fit.decomposition, r.subject_ids);
    write_json(dir / "results.json", results_json(r, config));
}

}  // namespace dynvar
