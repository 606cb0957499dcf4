#pragma once

// Independent reference implementations used by the unit and acceptance
// suites. Nothing here calls into the solver, the community detection or the
// metric code under test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dynvar/core.hpp"
#include "dynvar/simulate.hpp"

namespace oracle {

using dynvar::Matrix;

// Per-coordinate penalties for the three levels, laid out like the blocks.
struct Penalties {
    Matrix gamma;
    std::vector<Matrix> pi;
    std::vector<Matrix> upsilon;
};

inline Penalties uniform_penalties(int d, int dp, int S, std::size_t K, double l1, double a, double l2,
                                   bool exempt_gamma_diagonal) {
    Penalties p;
    p.gamma = Matrix::Constant(d, dp, l1);
    if (exempt_gamma_diagonal)
        for (int i = 0; i < d; ++i) p.gamma(i, i) = 0.0;
    p.pi.assign(static_cast<std::size_t>(S), Matrix::Constant(d, dp, a));
    p.upsilon.assign(K, Matrix::Constant(d, dp, l2));
    return p;
}

// Cyclic coordinate descent on
//   sum_k (1/N_k) ||Y^k - (G + P^{s(k)} + U^k) Z^k||^2 + sum w |theta|
// with exact univariate minimisation (soft threshold) per coordinate, kept
// residuals, run until a full sweep moves nothing by more than `tol`.
inline dynvar::TransitionDecomposition coordinate_descent(const std::vector<dynvar::RegressionForm>& forms,
                                                          const dynvar::SubgroupAssignment& assignment,
                                                          const Penalties& pen, double tol = 1e-10,
                                                          int max_sweeps = 2000000) {
    const auto K = forms.size();
    const auto d = forms.front().Y.rows();
    const auto dp = forms.front().Z.rows();
    auto dec = dynvar::TransitionDecomposition::zeros(static_cast<int>(d), static_cast<int>(dp / d), K, assignment);
    std::vector<Matrix> resid;
    for (const auto& f : forms) resid.push_back(f.Y);

    auto soft = [](double x, double t) { return x > t ? x - t : (x < -t ? x + t : 0.0); };
    // Moves coordinate (i, j) of a block shared by `members`.
    auto update = [&](double& x, double w, Eigen::Index i, Eigen::Index j, const std::vector<std::size_t>& members) {
        double curv = 0.0, lin = 0.0;
        for (auto k : members) {
            const double n = static_cast<double>(forms[k].Y.cols());
            const auto z = forms[k].Z.row(j);
            curv += z.squaredNorm() / n;
            lin += (resid[k].row(i).dot(z)) / n;
        }
        if (curv == 0.0) return 0.0;
        // minimise curv*x'^2 - 2*(lin + curv*x)*x' + w|x'|
        const double target = soft(lin + curv * x, 0.5 * w) / curv;
        const double delta = target - x;
        if (delta != 0.0)
            for (auto k : members) resid[k].row(i) -= delta * forms[k].Z.row(j);
        x = target;
        return std::abs(delta);
    };

    std::vector<std::size_t> everyone(K);
    for (std::size_t k = 0; k < K; ++k) everyone[k] = k;
    std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(assignment.S));
    for (std::size_t k = 0; k < K && assignment.S > 0; ++k)
        groups[static_cast<std::size_t>(assignment.group_of(k))].push_back(k);

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double moved = 0.0;
        for (Eigen::Index j = 0; j < dp; ++j)
            for (Eigen::Index i = 0; i < d; ++i) {
                moved = std::max(moved, update(dec.gamma(i, j), pen.gamma(i, j), i, j, everyone));
                for (std::size_t s = 0; s < groups.size(); ++s)
                    moved = std::max(moved, update(dec.pi[s](i, j), pen.pi[s](i, j), i, j, groups[s]));
                for (std::size_t k = 0; k < K; ++k)
                    moved = std::max(moved, update(dec.upsilon[k](i, j), pen.upsilon[k](i, j), i, j, {k}));
            }
        if (moved < tol) break;
    }
    return dec;
}

// Newman modularity straight from the definition
//   Q = (1/2m) sum_ij [A_ij - k_i k_j / 2m] delta(c_i, c_j).
inline double modularity(const Matrix& A, const std::vector<int>& labels) {
    const double two_m = A.sum();
    if (two_m == 0.0) return 0.0;
    const Eigen::VectorXd k = A.rowwise().sum();
    double q = 0.0;
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j)
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)])
                q += A(i, j) - k(i) * k(j) / two_m;
    return q / two_m;
}

// Every set partition of {0..n-1} as restricted growth strings (labels from 1).
inline void for_each_partition(int n, const std::function<void(const std::vector<int>&)>& fn) {
    std::vector<int> labels(static_cast<std::size_t>(n), 1);
    std::function<void(int, int)> rec = [&](int pos, int max_label) {
        if (pos == n) {
            fn(labels);
            return;
        }
        for (int l = 1; l <= max_label + 1; ++l) {
            labels[static_cast<std::size_t>(pos)] = l;
            rec(pos + 1, std::max(max_label, l));
        }
    };
    labels[0] = 1;
    if (n == 1) {
        fn(labels);
        return;
    }
    rec(1, 1);
}

inline double best_modularity(const Matrix& A) {
    double best = -1.0;
    for_each_partition(static_cast<int>(A.rows()), [&](const std::vector<int>& l) { best = std::max(best, modularity(A, l)); });
    return best;
}

// Adjusted Rand index from the contingency table:
//   (sum C(n_ij,2) - [sum C(a_i,2) sum C(b_j,2)]/C(n,2)) /
//   (0.5[sum C(a_i,2) + sum C(b_j,2)] - [sum C(a_i,2) sum C(b_j,2)]/C(n,2))
inline double ari_contingency(const std::vector<int>& x, const std::vector<int>& y) {
    const int a_max = *std::max_element(x.begin(), x.end());
    const int b_max = *std::max_element(y.begin(), y.end());
    Eigen::MatrixXd n = Eigen::MatrixXd::Zero(a_max + 1, b_max + 1);
    for (std::size_t i = 0; i < x.size(); ++i) n(x[i], y[i]) += 1.0;
    auto c2 = [](double v) { return v * (v - 1.0) / 2.0; };
    double index = 0.0, ra = 0.0, rb = 0.0;
    for (Eigen::Index i = 0; i < n.rows(); ++i)
        for (Eigen::Index j = 0; j < n.cols(); ++j) index += c2(n(i, j));
    for (Eigen::Index i = 0; i < n.rows(); ++i) ra += c2(n.row(i).sum());
    for (Eigen::Index j = 0; j < n.cols(); ++j) rb += c2(n.col(j).sum());
    const double expected = ra * rb / c2(static_cast<double>(x.size()));
    const double maximum = 0.5 * (ra + rb);
    if (maximum == expected) return 1.0;
    return (index - expected) / (maximum - expected);
}

// Random stationary panel from a given per-subject transition matrix set.
inline std::vector<dynvar::RegressionForm> random_forms(const std::vector<Matrix>& phis, int T, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<dynvar::RegressionForm> out;
    for (const auto& phi : phis) {
        const auto d = phi.rows();
        Matrix x = Matrix::Zero(T + 20, d);
        for (int t = 1; t < T + 20; ++t) {
            Eigen::VectorXd e(d);
            for (Eigen::Index i = 0; i < d; ++i) e(i) = z(rng);
            x.row(t) = (phi * x.row(t - 1).transpose() + e).transpose();
        }
        dynvar::SubjectSeries s;
        s.values = x.bottomRows(T);
        out.push_back(dynvar::build_regression_form(s, 1));
    }
    return out;
}


// Structural contract of one generated dataset. Returns an empty string when
// every invariant holds, otherwise a description of the first violation.
inline std::string generator_violation(const dynvar::GeneratedDataset& g, const dynvar::SimulationDesign& design) {
    const int d = design.dims.d;
    const auto K = static_cast<std::size_t>(design.dims.K);
    const int n_sub = static_cast<int>(std::ceil(design.subgroup_density * d * (d - 1) - 1e-9));
    const int n_unique = static_cast<int>(std::ceil(design.unique_density * d * (d - 1) - 1e-9));
    if (g.panel.size() != K) return "wrong subject count";
    if (g.truth.subgroups() != design.S) return "wrong subgroup count";
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            const double v = g.truth.gamma(i, j);
            if (i == j && !(v > 0.0 && v < 1.0)) return "common diagonal outside (0,1)";
            if (i != j && v != 0.0) return "common effect off the diagonal";
        }
    for (const auto& pi : g.truth.pi) {
        if ((pi.diagonal().array() != 0.0).any()) return "subgroup effect on the diagonal";
        if ((pi.array() != 0.0).count() != n_sub) return "subgroup effect count";
        if ((pi.array() < 0.0).any() || (pi.array() >= 1.0).any()) return "subgroup magnitude outside [0,1)";
    }
    for (std::size_t k = 0; k < K; ++k) {
        const auto& u = g.truth.upsilon[k];
        const auto& pi = g.truth.pi[static_cast<std::size_t>(g.true_assignment.group_of(k))];
        if ((u.diagonal().array() != 0.0).any()) return "unique effect on the diagonal";
        if ((u.array() != 0.0).count() != n_unique) return "unique effect count";
        if (((u.array() != 0.0) && (pi.array() != 0.0)).any()) return "unique and subgroup supports overlap";
        const Matrix phi = g.truth.gamma + pi + u;
        if ((phi.array() != 0.0).count() != d + n_sub + n_unique) return "composed nonzero count";
        Eigen::EigenSolver<Matrix> es(phi, false);
        if (es.eigenvalues().cwiseAbs().maxCoeff() >= 1.0) return "nonstationary subject";
        const auto& s = g.panel.subjects[k];
        if (s.values.rows() != design.dims.T || s.values.cols() != d) return "series shape";
        if (!s.values.allFinite()) return "non-finite series value";
    }
    return {};
}

}  // namespace oracle
