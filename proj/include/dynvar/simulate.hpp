#pragma once

// Synthetic multi-subject VAR(1) panels with a known common/subgroup/unique
// decomposition: diagonal common effects, sparse off-diagonal subgroup and
// unique effects, U(0,1) magnitudes redrawn until every subject is stationary.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dynvar/core.hpp"
#include "dynvar/parallel.hpp"

namespace dynvar {

enum class Balance { balanced, unbalanced };

inline const char* to_string(Balance b) { return b == Balance::balanced ? "balanced" : "unbalanced"; }

struct NoiseSpec {
    Matrix covariance;  // d x d; empty means identity
};

struct SimulationDesign {
    Dimensions dims{10, 50, 50, 1};
    int S = 2;
    Balance balance = Balance::balanced;
    double subgroup_density = 0.05;
    double unique_density = 0.05;
    int burn_in = 50;
    std::uint64_t seed = 1;
    NoiseSpec noise;
    int max_redraws = 1000;

    void validate() const {
        dims.validate();
        if (dims.p != 1) throw ConfigError("p: the generator supports lag order 1 only");
        if (dims.d < 2) throw ConfigError("variables: need d >= 2");
        if (S < 1) throw ConfigError("subgroups: need S >= 1");
        if (dims.K < S) throw ConfigError("subjects: need K >= S");
        if (!(subgroup_density >= 0.0 && subgroup_density < 1.0))
            throw ConfigError("subgroup_density: must lie in [0, 1)");
        if (!(unique_density >= 0.0 && unique_density < 1.0))
            throw ConfigError("unique_density: must lie in [0, 1)");
        if (burn_in < 0) throw ConfigError("burn_in: must be >= 0");
        if (max_redraws < 1) throw ConfigError("max_redraws: must be >= 1");
    }
};

struct GeneratedDataset {
    MultiSubjectPanel panel;
    TransitionDecomposition truth;
    SubgroupAssignment true_assignment;
};

/// Contiguous subgroup blocks. Balanced sizes differ by at most one (extra
/// members go to the earliest groups); unbalanced uses 30/70 for S=2 and
/// 20/20/60 for S=3.
inline SubgroupAssignment assign_subgroups(int K, int S, Balance balance) {
    if (S < 1) throw ConfigError("subgroups: need S >= 1");
    if (K < S) throw ConfigError("subjects: need K >= S");
    std::vector<int> sizes;
    if (balance == Balance::balanced || S == 1) {
        for (int s = 0; s < S; ++s) sizes.push_back(K / S + (s < K % S ? 1 : 0));
    } else if (S == 2) {
        const int first = static_cast<int>(std::lround(0.3 * K));
        sizes = {first, K - first};
    } else if (S == 3) {
        const int small = static_cast<int>(std::lround(0.2 * K));
        sizes = {small, small, K - 2 * small};
    } else {
        throw ConfigError("balance: unbalanced designs are defined for S = 2 or 3 only");
    }
    for (int n : sizes)
        if (n < 1) throw ConfigError("subjects: too few subjects for the requested split");
    SubgroupAssignment out;
    out.S = S;
    for (int s = 0; s < S; ++s) out.labels.insert(out.labels.end(), sizes[s], s + 1);
    return out;
}

inline Matrix companion_matrix(const Matrix& phi) {
    const Eigen::Index d = phi.rows();
    const Eigen::Index dp = phi.cols();
    if (d == 0 || dp % d != 0) throw DimensionError("transition matrix must be d x dp");
    Matrix comp = Matrix::Zero(dp, dp);
    comp.topRows(d) = phi;
    if (dp > d) comp.bottomLeftCorner(dp - d, dp - d).setIdentity();
    return comp;
}

inline double spectral_radius(const Matrix& square) {
    if (square.size() == 0) return 0.0;
    Eigen::EigenSolver<Matrix> solver(square, false);
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

/// Stationary iff the companion matrix has spectral radius below 1 - 1e-8.
inline bool check_stationary(const Matrix& phi) {
    return spectral_radius(companion_matrix(phi)) < 1.0 - 1e-8;
}

namespace detail {

inline int effect_count(double density, int d) {
    const double raw = density * d * (d - 1);
    return static_cast<int>(std::ceil(raw - 1e-9));
}

using Cell = std::pair<int, int>;

// Draws `count` cells uniformly without replacement from `candidates`.
inline std::vector<Cell> draw_cells(std::vector<Cell> candidates, int count, std::mt19937_64& rng) {
    if (count > static_cast<int>(candidates.size()))
        throw ConfigError("density too high: not enough free off-diagonal cells");
    for (int i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i),
                                                        candidates.size() - 1);
        std::swap(candidates[static_cast<std::size_t>(i)], candidates[pick(rng)]);
    }
    candidates.resize(static_cast<std::size_t>(count));
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

inline std::vector<Cell> off_diagonal_cells(int d) {
    std::vector<Cell> cells;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (i != j) cells.emplace_back(i, j);
    return cells;
}

}  // namespace detail

/// Draws supports once, then magnitudes: the common and subgroup draw is
/// repeated until every Gamma + Pi^s is stationary, after which each subject's
/// unique magnitudes are redrawn until its Phi^k is stationary. A subject that
/// fails max_redraws times sends the whole draw back to the start.
inline TransitionDecomposition generate_truth(const SimulationDesign& design,
                                              const SubgroupAssignment& assignment) {
    design.validate();
    const int d = design.dims.d;
    const std::size_t K = assignment.size();
    assignment.validate(K);
    if (assignment.S < 1) throw ConfigError("generate_truth needs at least one subgroup");

    std::mt19937_64 rng(derive_seed(design.seed, 0));
    const auto all_cells = detail::off_diagonal_cells(d);
    const int n_sub = detail::effect_count(design.subgroup_density, d);
    const int n_unique = detail::effect_count(design.unique_density, d);

    std::vector<std::vector<detail::Cell>> sub_support(static_cast<std::size_t>(assignment.S));
    for (auto& sup : sub_support) sup = detail::draw_cells(all_cells, n_sub, rng);

    std::vector<std::vector<detail::Cell>> unique_support(K);
    for (std::size_t k = 0; k < K; ++k) {
        const auto& taken = sub_support[static_cast<std::size_t>(assignment.group_of(k))];
        std::vector<detail::Cell> free;
        for (const auto& c : all_cells)
            if (!std::binary_search(taken.begin(), taken.end(), c)) free.push_back(c);
        unique_support[k] = detail::draw_cells(std::move(free), n_unique, rng);
    }

    std::uniform_real_distribution<double> magnitude(0.0, 1.0);
    auto truth = TransitionDecomposition::zeros(d, 1, K, assignment);
    for (int attempt = 0; attempt < design.max_redraws; ++attempt) {
        truth.gamma.setZero();
        for (int i = 0; i < d; ++i) truth.gamma(i, i) = magnitude(rng);
        bool ok = true;
        for (int s = 0; s < assignment.S; ++s) {
            auto& m = truth.pi[static_cast<std::size_t>(s)];
            m.setZero();
            for (const auto& [i, j] : sub_support[static_cast<std::size_t>(s)]) m(i, j) = magnitude(rng);
            ok = ok && check_stationary(truth.gamma + m);
        }
        if (!ok) continue;
        // Shared levels are fixed now; each subject redraws its own unique
        // magnitudes until its composed matrix is stationary.
        for (std::size_t k = 0; k < K && ok; ++k) {
            auto& m = truth.upsilon[k];
            const Matrix shared = truth.gamma + truth.pi[static_cast<std::size_t>(assignment.group_of(k))];
            ok = false;
            for (int inner = 0; inner < design.max_redraws && !ok; ++inner) {
                m.setZero();
                for (const auto& [i, j] : unique_support[k]) m(i, j) = magnitude(rng);
                ok = check_stationary(shared + m);
            }
        }
        if (ok) return truth;
    }
    throw ConvergenceError("no stationary draw after " + std::to_string(design.max_redraws) +
                           " attempts (seed " + std::to_string(design.seed) + ")");
}

/// X_t = sum_l Phi_l X_{t-l} + E_t from a zero initial state; the first
/// burn_in points are discarded and exactly T points are returned.
inline SubjectSeries simulate_series(const Matrix& phi, const NoiseSpec& noise, int T, int burn_in,
                                     std::uint64_t seed, std::string subject_id = "S1") {
    const Eigen::Index d = phi.rows();
    if (d == 0 || phi.cols() % d != 0) throw DimensionError("transition matrix must be d x dp");
    if (T < 1 || burn_in < 0) throw DimensionError("T must be >= 1 and burn_in >= 0");
    if (!check_stationary(phi)) throw DataError("refusing to simulate a nonstationary process");
    const int p = static_cast<int>(phi.cols() / d);

    Matrix chol;
    if (noise.covariance.size() == 0) {
        chol = Matrix::Identity(d, d);
    } else {
        if (noise.covariance.rows() != d || noise.covariance.cols() != d)
            throw DimensionError("noise covariance must be d x d");
        if (noise.covariance.isZero(0.0)) {
            chol = Matrix::Zero(d, d);
        } else {
            Eigen::LLT<Matrix> llt(noise.covariance);
            if (llt.info() != Eigen::Success || !noise.covariance.isApprox(noise.covariance.transpose()))
                throw ConfigError("noise covariance must be symmetric positive definite");
            chol = llt.matrixL();
        }
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int total = T + burn_in;
    Matrix x = Matrix::Zero(total, d);
    Vector z(d);
    for (int t = 0; t < total; ++t) {
        for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(rng);
        Vector next = chol * z;
        for (int lag = 1; lag <= p && t - lag >= 0; ++lag)
            next.noalias() += phi.middleCols(d * (lag - 1), d) * x.row(t - lag).transpose();
        x.row(t) = next.transpose();
    }
    SubjectSeries out;
    out.subject_id = std::move(subject_id);
    out.values = x.bottomRows(T);
    return out;
}

inline std::string subject_label(std::size_t k, std::size_t K) {
    int width = 3;
    for (std::size_t n = K; n >= 1000; n /= 10) ++width;
    std::string n = std::to_string(k + 1);
    if (static_cast<int>(n.size()) < width) n.insert(0, static_cast<std::size_t>(width) - n.size(), '0');
    return "S" + n;
}

inline GeneratedDataset generate_dataset(const SimulationDesign& design) {
    design.validate();
    GeneratedDataset out;
    out.true_assignment = assign_subgroups(design.dims.K, design.S, design.balance);
    out.truth = generate_truth(design, out.true_assignment);
    out.panel.dims = design.dims;
    const auto K = static_cast<std::size_t>(design.dims.K);
    out.panel.subjects.reserve(K);
    for (std::size_t k = 0; k < K; ++k)
        out.panel.subjects.push_back(simulate_series(compose_transition(out.truth, k), design.noise,
                                                     design.dims.T, design.burn_in,
                                                     derive_seed(design.seed, k + 1),
                                                     subject_label(k, K)));
    return out;
}

}  // namespace dynvar
