#pragma once

// Subgroup discovery: count shared signed unique effects between subjects,
// run Walktrap (short random walks + Ward-style agglomeration) on that count
// graph and cut the merge history at maximum modularity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "dynvar/core.hpp"
#include "dynvar/estimate.hpp"

namespace dynvar {

struct SimilarityMatrix {
    Eigen::MatrixXi counts;  // K x K, symmetric, zero diagonal
    Eigen::Index size() const { return counts.rows(); }
};

struct MergeRecord {
    int cluster_a = 0;
    int cluster_b = 0;
    int new_cluster = 0;
    double merge_cost = 0.0;  // increase in mean squared walk distance
    double modularity = 0.0;  // of the partition right after this merge
};

struct MergeTree {
    int leaves = 0;
    std::vector<MergeRecord> merges;
};

struct CommunityPartition {
    SubgroupAssignment assignment;
    double modularity = 0.0;
};

/// counts(i, j) = number of cells nonzero in both Upsilon^i and Upsilon^j
/// with the same sign.
inline SimilarityMatrix build_similarity(const std::vector<Matrix>& upsilons, double zero_tolerance = kZeroTolerance) {
    const auto K = static_cast<Eigen::Index>(upsilons.size());
    SimilarityMatrix sim{Eigen::MatrixXi::Zero(K, K)};
    if (K == 0) return sim;
    for (const auto& u : upsilons)
        if (u.rows() != upsilons.front().rows() || u.cols() != upsilons.front().cols())
            throw DimensionError("unique-effect matrices differ in shape");
    std::vector<Eigen::MatrixXi> sign;
    sign.reserve(upsilons.size());
    for (const auto& u : upsilons)
        sign.push_back(u.unaryExpr([&](double v) { return std::abs(v) > zero_tolerance ? (v > 0 ? 1 : -1) : 0; })
                           .cast<int>());
    for (Eigen::Index i = 0; i < K; ++i)
        for (Eigen::Index j = i + 1; j < K; ++j) {
            const auto& a = sign[static_cast<std::size_t>(i)];
            const auto& b = sign[static_cast<std::size_t>(j)];
            const int c = ((a.array() != 0) && (a.array() == b.array())).count();
            sim.counts(i, j) = sim.counts(j, i) = c;
        }
    return sim;
}

/// Newman modularity sum_s (e_ss - a_s^2) of a labelling on a weighted graph.
inline double modularity(const Matrix& adjacency, const std::vector<int>& labels) {
    const double total = adjacency.sum();
    if (total <= 0.0) return 0.0;
    int S = 0;
    for (int l : labels) S = std::max(S, l);
    std::vector<double> inside(static_cast<std::size_t>(S) + 1, 0.0), degree(static_cast<std::size_t>(S) + 1, 0.0);
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
        const auto li = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        degree[li] += adjacency.row(i).sum();
        for (Eigen::Index j = 0; j < adjacency.cols(); ++j)
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) inside[li] += adjacency(i, j);
    }
    double q = 0.0;
    for (std::size_t s = 0; s < inside.size(); ++s) {
        const double a = degree[s] / total;
        q += inside[s] / total - a * a;
    }
    return q;
}

inline double modularity(const SimilarityMatrix& sim, const SubgroupAssignment& assignment) {
    return modularity(Matrix(sim.counts.cast<double>()), assignment.labels);
}

namespace detail {

// Relabels so clusters are numbered 1..S by first appearance.
inline SubgroupAssignment canonical_labels(const std::vector<int>& raw) {
    SubgroupAssignment out;
    std::vector<int> map;
    std::vector<int> seen_ids;
    for (int r : raw) {
        auto it = std::find(seen_ids.begin(), seen_ids.end(), r);
        if (it == seen_ids.end()) {
            seen_ids.push_back(r);
            out.labels.push_back(static_cast<int>(seen_ids.size()));
        } else {
            out.labels.push_back(static_cast<int>(it - seen_ids.begin()) + 1);
        }
    }
    out.S = static_cast<int>(seen_ids.size());
    return out;
}

}  // namespace detail

struct WalktrapResult {
    MergeTree tree;
    CommunityPartition partition;
};

/// Pons-Latapy Walktrap on the similarity graph.
///
/// Vertex distances come from t-step random-walk profiles P^t with P = D^-1 A;
/// adjacent communities merge in order of smallest
///   (1/n) |C1||C2| / (|C1|+|C2|) * sum_k (P^t_C1k - P^t_C2k)^2 / d(k),
/// and the partition with the largest modularity along the way is returned.
/// Isolated vertices stay singletons; an edgeless graph is one community.
inline WalktrapResult walktrap(const SimilarityMatrix& sim, int walk_length = 4) {
    const Eigen::Index K = sim.size();
    if (K < 2) throw DimensionError("walktrap needs at least 2 vertices");
    if (walk_length < 1) throw ConfigError("walk_length: must be >= 1");
    const Matrix A = sim.counts.cast<double>();
    if (!A.isApprox(A.transpose()) || (A.array() < 0).any())
        throw DataError("similarity matrix must be symmetric and nonnegative");

    WalktrapResult out;
    out.tree.leaves = static_cast<int>(K);
    const Vector degree = A.rowwise().sum();
    if (A.sum() <= 0.0) {
        out.partition.assignment.S = 1;
        out.partition.assignment.labels.assign(static_cast<std::size_t>(K), 1);
        out.partition.modularity = 0.0;
        return out;
    }

    Matrix P = Matrix::Zero(K, K);
    Eigen::Index n_connected = 0;
    for (Eigen::Index i = 0; i < K; ++i)
        if (degree(i) > 0) {
            P.row(i) = A.row(i) / degree(i);
            ++n_connected;
        }
    Matrix Pt = P;
    for (int s = 1; s < walk_length; ++s) Pt = Pt * P;
    Vector inv_degree = Vector::Zero(K);
    for (Eigen::Index i = 0; i < K; ++i)
        if (degree(i) > 0) inv_degree(i) = 1.0 / degree(i);

    struct Community {
        int id;
        std::vector<Eigen::Index> members;
        Vector profile;
        bool alive;
    };
    std::vector<Community> comms;
    for (Eigen::Index i = 0; i < K; ++i)
        comms.push_back({static_cast<int>(i), {i}, Pt.row(i).transpose(), true});
    // vertex -> index into comms of its current community
    std::vector<std::size_t> owner(static_cast<std::size_t>(K));
    for (Eigen::Index i = 0; i < K; ++i) owner[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);

    auto current_labels = [&] {
        std::vector<int> raw(static_cast<std::size_t>(K));
        for (Eigen::Index i = 0; i < K; ++i) raw[static_cast<std::size_t>(i)] = comms[owner[static_cast<std::size_t>(i)]].id;
        return raw;
    };
    auto sigma = [&](const Community& a, const Community& b) {
        const double na = static_cast<double>(a.members.size());
        const double nb = static_cast<double>(b.members.size());
        const double r2 = ((a.profile - b.profile).array().square() * inv_degree.array()).sum();
        return (na * nb / (na + nb)) * r2 / static_cast<double>(n_connected);
    };

    std::vector<int> best_raw = current_labels();
    double best_q = modularity(A, detail::canonical_labels(best_raw).labels);
    int next_id = static_cast<int>(K);
    for (;;) {
        // adjacency between live communities
        double best_cost = std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bb = 0;
        for (std::size_t a = 0; a < comms.size(); ++a) {
            if (!comms[a].alive) continue;
            for (std::size_t b = a + 1; b < comms.size(); ++b) {
                if (!comms[b].alive) continue;
                bool adjacent = false;
                for (auto i : comms[a].members) {
                    for (auto j : comms[b].members)
                        if (A(i, j) > 0.0) {
                            adjacent = true;
                            break;
                        }
                    if (adjacent) break;
                }
                if (!adjacent) continue;
                const double c = sigma(comms[a], comms[b]);
                if (c < best_cost) {
                    best_cost = c;
                    ba = a;
                    bb = b;
                }
            }
        }
        if (!std::isfinite(best_cost)) break;

        Community merged;
        merged.id = next_id++;
        merged.members = comms[ba].members;
        merged.members.insert(merged.members.end(), comms[bb].members.begin(), comms[bb].members.end());
        std::sort(merged.members.begin(), merged.members.end());
        const double na = static_cast<double>(comms[ba].members.size());
        const double nb = static_cast<double>(comms[bb].members.size());
        merged.profile = (na * comms[ba].profile + nb * comms[bb].profile) / (na + nb);
        merged.alive = true;
        comms[ba].alive = comms[bb].alive = false;
        const std::size_t slot = comms.size();
        for (auto i : merged.members) owner[static_cast<std::size_t>(i)] = slot;
        MergeRecord rec{comms[ba].id, comms[bb].id, merged.id, best_cost, 0.0};
        comms.push_back(std::move(merged));

        const auto raw = current_labels();
        rec.modularity = modularity(A, detail::canonical_labels(raw).labels);
        out.tree.merges.push_back(rec);
        if (rec.modularity > best_q + 1e-12) {
            best_q = rec.modularity;
            best_raw = raw;
        }
    }
    out.partition.assignment = detail::canonical_labels(best_raw);
    out.partition.modularity = modularity(A, out.partition.assignment.labels);
    return out;
}

struct DetectionSettings {
    EstimationSettings estimation;
    int walk_length = 4;
    double zero_tolerance = kZeroTolerance;
};

struct Detection {
    SubgroupAssignment assignment;
    CommunityPartition partition;
    MergeTree tree;
    SimilarityMatrix similarity;
    Estimate standard;               // the two-level fit the subgroups came from
    std::vector<bool> singleton;     // per cluster
};

/// Two-level fit -> unique effects -> similarity -> Walktrap.
inline Detection detect_subgroups(const MultiSubjectPanel& panel, const DetectionSettings& settings,
                                  const std::vector<Matrix>* initial = nullptr) {
    Detection out;
    out.standard = estimate_model(panel, {}, settings.estimation, initial);
    if (panel.size() < 2) {
        out.assignment = SubgroupAssignment{{1}, 1};
        out.partition.assignment = out.assignment;
        out.singleton = {true};
        return out;
    }
    out.similarity = build_similarity(out.standard.fit.decomposition.upsilon, settings.zero_tolerance);
    auto wt = walktrap(out.similarity, settings.walk_length);
    out.tree = std::move(wt.tree);
    out.partition = std::move(wt.partition);
    out.assignment = out.partition.assignment;
    for (auto n : out.assignment.sizes()) out.singleton.push_back(n == 1);
    return out;
}

}  // namespace dynvar
