#pragma once

// Domain types for multi-subject VAR panels and the common/subgroup/unique
// decomposition of per-subject transition matrices, plus the preprocessing
// steps (lag embedding, centering, linear imputation) every estimator needs.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dynvar {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Magnitudes at or below this count as zero when reading off supports.
inline constexpr double kZeroTolerance = 1e-8;

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes that do not line up, indices out of range, series too short.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Bad input data: NaN, too few observations to impute, and so on.
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// An optimisation or generation loop that ran out of attempts.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

struct Dimensions {
    int d = 1;  // variables
    int T = 2;  // time points per subject
    int K = 1;  // subjects
    int p = 1;  // lag order

    void validate() const {
        if (d < 1 || K < 1 || p < 1)
            throw DimensionError("dimensions must be strictly positive");
        if (T < p + 2)
            throw DimensionError("need at least p + 2 time points, got T=" + std::to_string(T));
    }
};

struct SubjectSeries {
    std::string subject_id;
    Matrix values;            // T x d, rows are time points
    BoolMatrix missing_mask;  // T x d; empty means fully observed

    int length() const { return static_cast<int>(values.rows()); }
    int variables() const { return static_cast<int>(values.cols()); }

    bool has_missing() const { return missing_mask.size() != 0 && missing_mask.any(); }

    bool is_missing(Eigen::Index t, Eigen::Index j) const {
        return missing_mask.size() != 0 && missing_mask(t, j);
    }
};

struct MultiSubjectPanel {
    Dimensions dims;
    std::vector<SubjectSeries> subjects;
    bool centered = false;

    std::size_t size() const { return subjects.size(); }
};

/// Checks the panel invariants: common d, no NaN among observed entries.
inline void validate_panel(const MultiSubjectPanel& panel) {
    if (panel.subjects.empty()) throw DimensionError("panel has no subjects");
    for (const auto& s : panel.subjects) {
        if (s.variables() != panel.dims.d)
            throw DimensionError("subject " + s.subject_id + " has " +
                                 std::to_string(s.variables()) + " variables, expected " +
                                 std::to_string(panel.dims.d));
        if (s.missing_mask.size() != 0 &&
            (s.missing_mask.rows() != s.values.rows() || s.missing_mask.cols() != s.values.cols()))
            throw DimensionError("missing mask shape mismatch for subject " + s.subject_id);
        for (Eigen::Index t = 0; t < s.values.rows(); ++t)
            for (Eigen::Index j = 0; j < s.values.cols(); ++j)
                if (!s.is_missing(t, j) && !std::isfinite(s.values(t, j)))
                    throw DataError("non-finite observed value in subject " + s.subject_id);
    }
}

/// Regression form Y = Phi Z + U of one subject's series.
///
/// Column t of Y holds the observation at time p + t. Column t of Z stacks
/// the p preceding observations, most recent lag first, so that
/// Phi = (Phi_1, ..., Phi_p) multiplies it directly.
struct RegressionForm {
    Matrix Y;  // d x (T - p)
    Matrix Z;  // dp x (T - p)

    Eigen::Index samples() const { return Y.cols(); }
};

struct SubgroupAssignment {
    std::vector<int> labels;  // 1-based cluster index per subject
    int S = 0;

    bool empty() const { return S == 0; }
    std::size_t size() const { return labels.size(); }
    /// Zero-based cluster of subject k.
    int group_of(std::size_t k) const { return labels[k] - 1; }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> out(static_cast<std::size_t>(S), 0);
        for (int l : labels) ++out[static_cast<std::size_t>(l - 1)];
        return out;
    }

    /// Labels in [1..S] and every cluster non-empty.
    void validate(std::size_t K) const {
        if (S == 0) {
            if (!labels.empty()) throw DimensionError("assignment with S=0 must have no labels");
            return;
        }
        if (labels.size() != K)
            throw DimensionError("assignment has " + std::to_string(labels.size()) +
                                 " labels for " + std::to_string(K) + " subjects");
        std::vector<bool> seen(static_cast<std::size_t>(S), false);
        for (int l : labels) {
            if (l < 1 || l > S) throw DimensionError("cluster label out of range");
            seen[static_cast<std::size_t>(l - 1)] = true;
        }
        for (bool b : seen)
            if (!b) throw DimensionError("assignment has an empty cluster");
    }
};

/// Common (gamma), subgroup (pi) and unique (upsilon) effects. Each matrix is
/// d x (dp) with lag blocks side by side.
struct TransitionDecomposition {
    Matrix gamma;
    std::vector<Matrix> pi;
    std::vector<Matrix> upsilon;
    SubgroupAssignment assignment;

    std::size_t subjects() const { return upsilon.size(); }
    int subgroups() const { return static_cast<int>(pi.size()); }

    static TransitionDecomposition zeros(int d, int p, std::size_t K,
                                         const SubgroupAssignment& assignment = {}) {
        TransitionDecomposition out;
        out.gamma = Matrix::Zero(d, d * p);
        out.pi.assign(static_cast<std::size_t>(assignment.S), Matrix::Zero(d, d * p));
        out.upsilon.assign(K, Matrix::Zero(d, d * p));
        out.assignment = assignment;
        return out;
    }
};

inline RegressionForm build_regression_form(const SubjectSeries& series, int p) {
    if (p < 1) throw DimensionError("lag order must be >= 1");
    if (series.has_missing())
        throw DataError("series " + series.subject_id + " must be imputed before lag embedding");
    const Eigen::Index T = series.values.rows();
    const Eigen::Index d = series.values.cols();
    if (T <= p)
        throw DimensionError("series " + series.subject_id + " has T=" + std::to_string(T) +
                             " <= p=" + std::to_string(p));
    const Eigen::Index n = T - p;
    RegressionForm form{Matrix(d, n), Matrix(d * p, n)};
    for (Eigen::Index t = 0; t < n; ++t) {
        form.Y.col(t) = series.values.row(t + p).transpose();
        for (int lag = 1; lag <= p; ++lag)
            form.Z.block(d * (lag - 1), t, d, 1) = series.values.row(t + p - lag).transpose();
    }
    return form;
}

/// Phi^k = Gamma + Pi^{s(k)} + Upsilon^k (zero-based k).
inline Matrix compose_transition(const TransitionDecomposition& decomp, std::size_t k) {
    if (k >= decomp.upsilon.size())
        throw DimensionError("subject index " + std::to_string(k) + " out of range");
    Matrix phi = decomp.gamma + decomp.upsilon[k];
    if (!decomp.pi.empty()) phi += decomp.pi[static_cast<std::size_t>(decomp.assignment.group_of(k))];
    return phi;
}

inline std::vector<Matrix> compose_all(const TransitionDecomposition& decomp) {
    std::vector<Matrix> out;
    out.reserve(decomp.subjects());
    for (std::size_t k = 0; k < decomp.subjects(); ++k) out.push_back(compose_transition(decomp, k));
    return out;
}

/// Subtracts each subject's own column means.
inline MultiSubjectPanel center_panel(MultiSubjectPanel panel) {
    for (auto& s : panel.subjects) {
        if (s.has_missing())
            throw DataError("series " + s.subject_id + " must be imputed before centering");
        if (s.values.rows() == 0) continue;
        const Eigen::RowVectorXd mean = s.values.colwise().mean();
        s.values.rowwise() -= mean;
    }
    panel.centered = true;
    return panel;
}

/// Linear interpolation between the nearest observed neighbours; leading and
/// trailing gaps repeat the nearest observed value.
inline SubjectSeries impute_linear(SubjectSeries series) {
    const Eigen::Index T = series.values.rows();
    const Eigen::Index d = series.values.cols();
    for (Eigen::Index j = 0; j < d; ++j) {
        std::vector<Eigen::Index> observed;
        for (Eigen::Index t = 0; t < T; ++t)
            if (!series.is_missing(t, j)) observed.push_back(t);
        if (observed.size() < 2)
            throw DataError("column " + std::to_string(j) + " of subject " + series.subject_id +
                            " has fewer than 2 observed values");
        if (static_cast<Eigen::Index>(observed.size()) == T) continue;
        for (Eigen::Index t = 0; t < observed.front(); ++t)
            series.values(t, j) = series.values(observed.front(), j);
        for (Eigen::Index t = observed.back() + 1; t < T; ++t)
            series.values(t, j) = series.values(observed.back(), j);
        for (std::size_t i = 0; i + 1 < observed.size(); ++i) {
            const Eigen::Index a = observed[i];
            const Eigen::Index b = observed[i + 1];
            if (b - a < 2) continue;
            const double va = series.values(a, j);
            const double vb = series.values(b, j);
            for (Eigen::Index t = a + 1; t < b; ++t) {
                const double w = static_cast<double>(t - a) / static_cast<double>(b - a);
                series.values(t, j) = va + w * (vb - va);
            }
        }
    }
    series.missing_mask = BoolMatrix();
    return series;
}

inline MultiSubjectPanel impute_panel(MultiSubjectPanel panel) {
    for (auto& s : panel.subjects)
        if (s.has_missing()) s = impute_linear(std::move(s));
    return panel;
}

/// Marks the autoregressive (diagonal) entry of every lag block.
inline BoolMatrix autoregressive_mask(int d, int p) {
    BoolMatrix mask = BoolMatrix::Constant(d, d * p, false);
    for (int lag = 0; lag < p; ++lag)
        for (int i = 0; i < d; ++i) mask(i, lag * d + i) = true;
    return mask;
}

}  // namespace dynvar
