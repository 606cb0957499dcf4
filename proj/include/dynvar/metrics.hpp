#pragma once

// Recovery metrics for estimated transition matrices and subgroup labels.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dynvar/core.hpp"

namespace dynvar {

struct ConfusionCounts {
    std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::int64_t total() const { return tp + tn + fp + fn; }
};

struct PairCounts {
    std::int64_t a = 0;        // same in truth, same in estimate
    std::int64_t b = 0;        // same in truth, different in estimate
    std::int64_t c = 0;        // different in truth, same in estimate
    std::int64_t d_pairs = 0;  // different in both
    std::int64_t total() const { return a + b + c + d_pairs; }
};

struct SubjectMetrics {
    ConfusionCounts counts;
    double sensitivity = std::nan("");
    double specificity = std::nan("");
    double mcc = 0.0;
    double absolute_bias = 0.0;
    double rmse = 0.0;
};

struct SupportRecovery {
    double sensitivity = std::nan("");
    double specificity = std::nan("");
    std::vector<SubjectMetrics> per_subject;
    std::vector<std::string> warnings;
};

struct MetricsReport {
    double sensitivity = std::nan("");
    double specificity = std::nan("");
    double mcc = std::nan("");
    double absolute_bias = std::nan("");
    double rmse = std::nan("");
    double ari = std::nan("");  // NaN when no subgroup labels were scored
    std::vector<SubjectMetrics> per_subject;
    std::vector<std::string> warnings;
};

inline ConfusionCounts confusion(const Matrix& est, const Matrix& truth, double tol = kZeroTolerance) {
    if (est.rows() != truth.rows() || est.cols() != truth.cols())
        throw DimensionError("estimate/truth shape mismatch");
    ConfusionCounts c;
    for (Eigen::Index i = 0; i < est.size(); ++i) {
        const bool e = std::abs(est.data()[i]) > tol;
        const bool t = std::abs(truth.data()[i]) > tol;
        if (e && t) ++c.tp;
        else if (!e && !t) ++c.tn;
        else if (e) ++c.fp;
        else ++c.fn;
    }
    return c;
}

namespace detail {
inline void check_matched(const std::vector<Matrix>& est, const std::vector<Matrix>& truth) {
    if (est.size() != truth.size()) throw DimensionError("estimate/truth subject count mismatch");
    if (est.empty()) throw DimensionError("no subjects to score");
    for (std::size_t k = 0; k < est.size(); ++k)
        if (est[k].rows() != truth[k].rows() || est[k].cols() != truth[k].cols())
            throw DimensionError("estimate/truth shape mismatch for subject " + std::to_string(k + 1));
}
}  // namespace detail

/// Mean per-subject true positive and true negative rates. Subjects whose
/// truth has no nonzero (no zero) cell are left out of the sensitivity
/// (specificity) mean with a warning.
inline SupportRecovery sensitivity_specificity(const std::vector<Matrix>& est, const std::vector<Matrix>& truth,
                                               double tol = kZeroTolerance) {
    detail::check_matched(est, truth);
    SupportRecovery out;
    double sens_sum = 0.0, spec_sum = 0.0;
    int sens_n = 0, spec_n = 0;
    for (std::size_t k = 0; k < est.size(); ++k) {
        SubjectMetrics m;
        m.counts = confusion(est[k], truth[k], tol);
        const auto& c = m.counts;
        if (c.tp + c.fn > 0) {
            m.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
            sens_sum += m.sensitivity;
            ++sens_n;
        } else {
            out.warnings.push_back("subject " + std::to_string(k + 1) + ": truth has no nonzero cell, sensitivity undefined");
        }
        if (c.tn + c.fp > 0) {
            m.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
            spec_sum += m.specificity;
            ++spec_n;
        } else {
            out.warnings.push_back("subject " + std::to_string(k + 1) + ": truth has no zero cell, specificity undefined");
        }
        out.per_subject.push_back(m);
    }
    if (sens_n > 0) out.sensitivity = sens_sum / sens_n;
    if (spec_n > 0) out.specificity = spec_sum / spec_n;
    return out;
}

/// Matthews correlation; 0 when any denominator factor is 0.
inline double mcc(const ConfusionCounts& c) {
    const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
    const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (den == 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(den);
}

inline double mcc(const std::vector<Matrix>& est, const std::vector<Matrix>& truth, double tol = kZeroTolerance) {
    detail::check_matched(est, truth);
    double sum = 0.0;
    for (std::size_t k = 0; k < est.size(); ++k) sum += mcc(confusion(est[k], truth[k], tol));
    return sum / static_cast<double>(est.size());
}

struct BiasRmse {
    double absolute_bias = 0.0;
    double rmse = 0.0;
};

/// Mean over subjects of the cell-averaged absolute error, and of the
/// root cell-averaged squared error.
inline BiasRmse bias_rmse(const std::vector<Matrix>& est, const std::vector<Matrix>& truth) {
    detail::check_matched(est, truth);
    BiasRmse out;
    for (std::size_t k = 0; k < est.size(); ++k) {
        const double cells = static_cast<double>(est[k].size());
        const Matrix diff = est[k] - truth[k];
        out.absolute_bias += diff.cwiseAbs().sum() / cells;
        out.rmse += std::sqrt(diff.squaredNorm() / cells);
    }
    out.absolute_bias /= static_cast<double>(est.size());
    out.rmse /= static_cast<double>(est.size());
    return out;
}

inline PairCounts pair_counts(const SubgroupAssignment& est, const SubgroupAssignment& truth) {
    if (est.size() != truth.size()) throw DimensionError("partitions cover different subject counts");
    PairCounts pc;
    const std::size_t K = est.size();
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = i + 1; j < K; ++j) {
            const bool same_t = truth.labels[i] == truth.labels[j];
            const bool same_e = est.labels[i] == est.labels[j];
            if (same_t && same_e) ++pc.a;
            else if (same_t) ++pc.b;
            else if (same_e) ++pc.c;
            else ++pc.d_pairs;
        }
    return pc;
}

/// Hubert-Arabie adjusted Rand index. When the expected-agreement term fills
/// the whole denominator the partitions are identical and trivial; that case
/// scores 1.
inline double ari(const SubgroupAssignment& est, const SubgroupAssignment& truth) {
    if (est.size() < 2) throw DimensionError("ARI needs at least 2 subjects");
    const PairCounts pc = pair_counts(est, truth);
    const double a = static_cast<double>(pc.a), b = static_cast<double>(pc.b);
    const double c = static_cast<double>(pc.c), d = static_cast<double>(pc.d_pairs);
    const double n = a + b + c + d;
    const double expected = (a + b) * (a + c) + (c + d) * (b + d);
    const double den = n * n - expected;
    if (den == 0.0) return 1.0;
    return (n * (a + d) - expected) / den;
}

/// Sample standard deviation across replications.
inline double monte_carlo_error(const std::vector<double>& values) {
    if (values.size() < 2) throw DimensionError("Monte Carlo error needs at least 2 values");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

enum class RecoveryBand { excellent, good, moderate, poor };

inline const char* to_string(RecoveryBand b) {
    switch (b) {
        case RecoveryBand::excellent: return "excellent";
        case RecoveryBand::good: return "good";
        case RecoveryBand::moderate: return "moderate";
        case RecoveryBand::poor: return "poor";
    }
    return "poor";
}

inline RecoveryBand recovery_band(double ari_value) {
    if (ari_value >= 0.90) return RecoveryBand::excellent;
    if (ari_value >= 0.80) return RecoveryBand::good;
    if (ari_value >= 0.65) return RecoveryBand::moderate;
    return RecoveryBand::poor;
}

/// All transition-matrix metrics on composed matrices, plus ARI when both
/// label sets are given.
inline MetricsReport evaluate(const std::vector<Matrix>& est, const std::vector<Matrix>& truth,
                              const SubgroupAssignment* est_labels = nullptr,
                              const SubgroupAssignment* true_labels = nullptr, double tol = kZeroTolerance) {
    MetricsReport r;
    auto support = sensitivity_specificity(est, truth, tol);
    r.sensitivity = support.sensitivity;
    r.specificity = support.specificity;
    r.warnings = std::move(support.warnings);
    const BiasRmse br = bias_rmse(est, truth);
    r.absolute_bias = br.absolute_bias;
    r.rmse = br.rmse;
    double mcc_sum = 0.0;
    for (std::size_t k = 0; k < est.size(); ++k) {
        SubjectMetrics& m = support.per_subject[k];
        m.mcc = mcc(m.counts);
        mcc_sum += m.mcc;
        const Matrix diff = est[k] - truth[k];
        const double cells = static_cast<double>(diff.size());
        m.absolute_bias = diff.cwiseAbs().sum() / cells;
        m.rmse = std::sqrt(diff.squaredNorm() / cells);
    }
    r.mcc = mcc_sum / static_cast<double>(est.size());
    r.per_subject = std::move(support.per_subject);
    if (est_labels != nullptr && true_labels != nullptr && est.size() >= 2) {
        SubgroupAssignment e = *est_labels;
        if (e.empty()) {  // no subgroups: everyone in one cluster
            e.S = 1;
            e.labels.assign(est.size(), 1);
        }
        r.ari = ari(e, *true_labels);
    }
    return r;
}

}  // namespace dynvar
