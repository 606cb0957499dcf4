#pragma once

// Penalized multi-subject VAR estimation.
//
// Minimises
//
//   sum_k (1/N_k) || Y^k - (Gamma + Pi^{s(k)} + Upsilon^k) Z^k ||_F^2
//     + lambda1 |W_G o Gamma|_1 + alpha sum_s |W_P^s o Pi^s|_1
//     + lambda2 sum_k |W_U^k o Upsilon^k|_1
//
// by monotone accelerated proximal gradient. The loss only enters through the
// per-subject sufficient statistics Z Z', Y Z' and ||Y||^2, so one iteration
// costs O(K d^3 p^2) regardless of the series length. Each block gets its own
// step (the inverse of its block Lipschitz constant, scaled by a common
// backtracked factor) which keeps the pooled Gamma direction and the
// per-subject Upsilon directions equally well conditioned.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dynvar/core.hpp"

namespace dynvar {

enum class PenaltyMode { standard, adaptive };
enum class StepRule { fixed_lipschitz, backtracking };
enum class Block { gamma, pi, upsilon };

struct PenaltyConfig {
    double lambda1 = 0.0;  // common effects
    double alpha_s = 0.0;  // subgroup effects, shared by all subgroups
    double lambda2 = 0.0;  // unique effects, shared by all subjects
    BoolMatrix exempt_mask;          // d x dp, true = never penalised; empty = none
    bool exempt_all_blocks = false;  // false: the mask applies to gamma only
    PenaltyMode mode = PenaltyMode::standard;
    double adaptive_exponent = 1.0;

    void validate() const {
        for (double v : {lambda1, alpha_s, lambda2})
            if (!std::isfinite(v) || v < 0.0) throw ConfigError("penalties must be finite and >= 0");
        if (!(adaptive_exponent >= 1.0)) throw ConfigError("adaptive_exponent: must be >= 1");
    }

    bool exempt(Eigen::Index i, Eigen::Index j) const {
        return exempt_mask.size() != 0 && exempt_mask(i, j);
    }
};

struct AdaptiveWeights {
    Matrix w_gamma;
    std::vector<Matrix> w_pi;
    std::vector<Matrix> w_upsilon;
    double epsilon_floor = 1e-4;
};

struct SolverOptions {
    int max_iterations = 10000;
    double tolerance = 1e-6;  // relative objective change that triggers a KKT check
    StepRule step_rule = StepRule::backtracking;
    double initial_step = 1.0;  // multiplier on the per-block inverse Lipschitz steps
    double kkt_tolerance = 1e-4;
    int kkt_check_interval = 10;
    // Blocks switched off here are held at exactly zero.
    bool fit_gamma = true;
    bool fit_pi = true;
    bool fit_upsilon = true;

    void validate() const {
        if (!(tolerance > 0.0)) throw ConfigError("tolerance: must be > 0");
        if (!(kkt_tolerance > 0.0)) throw ConfigError("kkt_tolerance: must be > 0");
        if (max_iterations < 1) throw ConfigError("max_iterations: must be >= 1");
        if (!(initial_step > 0.0)) throw ConfigError("initial_step: must be > 0");
    }
};

struct FitResult {
    TransitionDecomposition decomposition;
    std::vector<double> objective_trace;
    int iterations = 0;
    bool converged = false;
    double kkt_residual = std::numeric_limits<double>::infinity();
};

inline double soft_threshold(double x, double t) {
    const double m = std::abs(x) - t;
    return m > 0.0 ? std::copysign(m, x) : 0.0;
}

// ---------------------------------------------------------------------------
// Sufficient statistics

struct SubjectStats {
    Matrix gram;   // Z Z'   (dp x dp)
    Matrix cross;  // Y Z'   (d x dp)
    double yy = 0.0;
    double n = 0.0;

    SubjectStats& operator+=(const SubjectStats& other) {
        if (gram.size() == 0) return *this = other;
        gram += other.gram;
        cross += other.cross;
        yy += other.yy;
        n += other.n;
        return *this;
    }
};

inline SubjectStats make_stats(const RegressionForm& form) {
    SubjectStats s;
    s.gram.noalias() = form.Z * form.Z.transpose();
    s.cross.noalias() = form.Y * form.Z.transpose();
    s.yy = form.Y.squaredNorm();
    s.n = static_cast<double>(form.samples());
    return s;
}

inline SubjectStats empty_stats(int d, int p) {
    return {Matrix::Zero(d * p, d * p), Matrix::Zero(d, d * p), 0.0, 0.0};
}

struct FitData {
    int d = 0;
    int p = 1;
    std::vector<SubjectStats> subjects;

    std::size_t size() const { return subjects.size(); }
};

inline std::vector<RegressionForm> regression_forms(const MultiSubjectPanel& panel) {
    std::vector<RegressionForm> forms;
    forms.reserve(panel.size());
    for (const auto& s : panel.subjects) forms.push_back(build_regression_form(s, panel.dims.p));
    return forms;
}

inline FitData make_fit_data(const std::vector<RegressionForm>& forms, int d, int p) {
    FitData data{d, p, {}};
    data.subjects.reserve(forms.size());
    for (const auto& f : forms) {
        if (f.Y.rows() != d || f.Z.rows() != d * p) throw DimensionError("regression form shape mismatch");
        if (!f.Y.allFinite() || !f.Z.allFinite()) throw DataError("non-finite value in data");
        data.subjects.push_back(make_stats(f));
    }
    return data;
}

inline FitData make_fit_data(const MultiSubjectPanel& panel) {
    validate_panel(panel);
    return make_fit_data(regression_forms(panel), panel.dims.d, panel.dims.p);
}

// ---------------------------------------------------------------------------
// Adaptive weights

namespace detail {

inline double median_of(std::vector<double>& v) {
    const std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline Matrix elementwise_median(const std::vector<const Matrix*>& mats) {
    const Matrix& first = *mats.front();
    Matrix out(first.rows(), first.cols());
    std::vector<double> buf(mats.size());
    for (Eigen::Index j = 0; j < first.cols(); ++j)
        for (Eigen::Index i = 0; i < first.rows(); ++i) {
            for (std::size_t m = 0; m < mats.size(); ++m) buf[m] = (*mats[m])(i, j);
            out(i, j) = median_of(buf);
        }
    return out;
}

inline Matrix reciprocal_weight(const Matrix& magnitude, double alpha, double floor) {
    return magnitude.unaryExpr([&](double v) { return 1.0 / std::pow(std::max(std::abs(v), floor), alpha); });
}

}  // namespace detail

/// Weights from initial per-subject estimates: the overall median drives the
/// common weights, subgroup medians the subgroup weights, and each subject's
/// deviation from the overall median its unique weights.
inline AdaptiveWeights compute_adaptive_weights(const std::vector<Matrix>& initial,
                                                const SubgroupAssignment& assignment, double alpha = 1.0,
                                                double floor = 1e-4) {
    if (initial.empty()) throw DimensionError("no initial estimates");
    if (!(alpha >= 1.0)) throw ConfigError("adaptive_exponent: must be >= 1");
    if (!(floor > 0.0)) throw ConfigError("weight floor must be > 0");
    for (const auto& m : initial)
        if (m.rows() != initial.front().rows() || m.cols() != initial.front().cols())
            throw DimensionError("initial estimates differ in shape");
    if (!assignment.empty() && assignment.size() != initial.size())
        throw DimensionError("assignment does not match the number of initial estimates");

    std::vector<const Matrix*> all;
    for (const auto& m : initial) all.push_back(&m);
    const Matrix median = detail::elementwise_median(all);

    AdaptiveWeights w;
    w.epsilon_floor = floor;
    w.w_gamma = detail::reciprocal_weight(median, alpha, floor);
    for (int s = 0; s < assignment.S; ++s) {
        std::vector<const Matrix*> members;
        for (std::size_t k = 0; k < initial.size(); ++k)
            if (assignment.group_of(k) == s) members.push_back(&initial[k]);
        if (members.empty()) throw DimensionError("subgroup " + std::to_string(s + 1) + " is empty");
        w.w_pi.push_back(detail::reciprocal_weight(detail::elementwise_median(members), alpha, floor));
    }
    for (const auto& m : initial) w.w_upsilon.push_back(detail::reciprocal_weight(m - median, alpha, floor));
    return w;
}

// ---------------------------------------------------------------------------
// Penalty layout

namespace detail {

constexpr double kFrozen = std::numeric_limits<double>::infinity();

// Penalty per coordinate laid out like the stacked parameter matrix
// [Gamma | Pi^1 .. Pi^S | Upsilon^1 .. Upsilon^K]. Zero = unpenalised,
// +inf = held at zero.
inline Matrix penalty_layout(int d, int dp, int S, std::size_t K, const PenaltyConfig& pen,
                             const AdaptiveWeights* weights, const SolverOptions& opt) {
    const bool adaptive = pen.mode == PenaltyMode::adaptive;
    if (adaptive) {
        if (weights == nullptr) throw ConfigError("adaptive penalties need adaptive weights");
        if (weights->w_gamma.rows() != d || weights->w_gamma.cols() != dp ||
            weights->w_upsilon.size() != K || static_cast<int>(weights->w_pi.size()) < S)
            throw DimensionError("adaptive weight shapes do not match the problem");
    }
    if (pen.exempt_mask.size() != 0 && (pen.exempt_mask.rows() != d || pen.exempt_mask.cols() != dp))
        throw DimensionError("exempt mask must be d x dp");
    const std::size_t B = 1 + static_cast<std::size_t>(S) + K;
    Matrix out(d, dp * static_cast<Eigen::Index>(B));
    auto fill = [&](std::size_t b, double lambda, const Matrix* w, bool exemptable, bool active) {
        auto blk = out.middleCols(static_cast<Eigen::Index>(b) * dp, dp);
        for (Eigen::Index j = 0; j < dp; ++j)
            for (Eigen::Index i = 0; i < d; ++i) {
                if (!active)
                    blk(i, j) = kFrozen;
                else if (exemptable && pen.exempt(i, j))
                    blk(i, j) = 0.0;
                else
                    blk(i, j) = lambda * (w != nullptr ? (*w)(i, j) : 1.0);
            }
    };
    fill(0, pen.lambda1, adaptive ? &weights->w_gamma : nullptr, true, opt.fit_gamma);
    for (int s = 0; s < S; ++s)
        fill(1 + static_cast<std::size_t>(s), pen.alpha_s,
             adaptive ? &weights->w_pi[static_cast<std::size_t>(s)] : nullptr, pen.exempt_all_blocks,
             opt.fit_pi);
    for (std::size_t k = 0; k < K; ++k)
        fill(1 + static_cast<std::size_t>(S) + k, pen.lambda2, adaptive ? &weights->w_upsilon[k] : nullptr,
             pen.exempt_all_blocks, opt.fit_upsilon);
    return out;
}

// The smooth part of the objective on sufficient statistics, plus the prox
// machinery, for one (data, assignment, penalty layout) triple.
class Problem {
public:
    Problem(const FitData& data, const SubgroupAssignment& assignment, Matrix penalty)
        : data_(data), d_(data.d), dp_(data.d * data.p), S_(assignment.S), K_(data.size()),
          pen_(std::move(penalty)), phi_(d_, dp_), pg_(d_, dp_) {
        group_.assign(K_, -1);
        if (S_ > 0) {
            assignment.validate(K_);
            for (std::size_t k = 0; k < K_; ++k) group_[k] = assignment.group_of(k);
        }
        for (const auto& s : data.subjects)
            if (s.gram.rows() != dp_ || s.cross.rows() != d_ || s.cross.cols() != dp_)
                throw DimensionError("sufficient statistics shape mismatch");
        compute_lipschitz();
    }

    Eigen::Index cols() const { return dp_ * static_cast<Eigen::Index>(blocks()); }
    std::size_t blocks() const { return 1 + static_cast<std::size_t>(S_) + K_; }
    const Matrix& penalty() const { return pen_; }

    auto block(Matrix& m, std::size_t b) const { return m.middleCols(static_cast<Eigen::Index>(b) * dp_, dp_); }
    auto block(const Matrix& m, std::size_t b) const {
        return m.middleCols(static_cast<Eigen::Index>(b) * dp_, dp_);
    }
    std::size_t pi_block(int s) const { return 1 + static_cast<std::size_t>(s); }
    std::size_t upsilon_block(std::size_t k) const { return 1 + static_cast<std::size_t>(S_) + k; }

    void compose(const Matrix& theta, std::size_t k, Matrix& out) const {
        out = block(theta, 0) + block(theta, upsilon_block(k));
        if (group_[k] >= 0) out += block(theta, pi_block(group_[k]));
    }

    /// Loss value; fills the gradient when `grad` is non-null.
    double smooth(const Matrix& theta, Matrix* grad, bool want_loss = true) {
        if (grad != nullptr) grad->setZero(d_, cols());
        double loss = 0.0;
        for (std::size_t k = 0; k < K_; ++k) {
            const SubjectStats& st = data_.subjects[k];
            if (st.n <= 0.0) continue;
            compose(theta, k, phi_);
            pg_.noalias() = phi_.lazyProduct(st.gram);
            if (want_loss)
                loss += (st.yy - 2.0 * phi_.cwiseProduct(st.cross).sum() + pg_.cwiseProduct(phi_).sum()) / st.n;
            if (grad != nullptr) {
                auto r = block(*grad, upsilon_block(k));
                r = (2.0 / st.n) * (pg_ - st.cross);
                block(*grad, 0) += r;
                if (group_[k] >= 0) block(*grad, pi_block(group_[k])) += r;
            }
        }
        return loss;
    }

    double penalty_value(const Matrix& theta) const {
        double total = 0.0;
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            const double x = theta.data()[i];
            if (x != 0.0) total += pen_.data()[i] * std::abs(x);
        }
        return total;
    }

    void set_step_scale(double c) {
        step_.resize(blocks());
        for (std::size_t b = 0; b < blocks(); ++b) step_[b] = c / lipschitz_[b];
    }
    const std::vector<double>& steps() const { return step_; }

    /// out = prox(v - step * grad) blockwise.
    void prox_step(const Matrix& v, const Matrix& grad, Matrix& out) const {
        out.resize(d_, cols());
        const Eigen::Index per_block = d_ * dp_;
        const double* pv = v.data();
        const double* pg = grad.data();
        const double* pw = pen_.data();
        double* po = out.data();
        for (std::size_t b = 0; b < blocks(); ++b) {
            const double h = step_[b];
            const Eigen::Index off = static_cast<Eigen::Index>(b) * per_block;
            for (Eigen::Index i = off; i < off + per_block; ++i) po[i] = soft_threshold(pv[i] - h * pg[i], h * pw[i]);
        }
    }

    /// Sum_b ||diff_b||^2 / (2 step_b).
    double metric_quadratic(const Matrix& diff) const {
        double q = 0.0;
        for (std::size_t b = 0; b < blocks(); ++b) q += block(diff, b).squaredNorm() / (2.0 * step_[b]);
        return q;
    }

    double kkt(const Matrix& theta, const Matrix& grad) const {
        double worst = 0.0;
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            const double w = pen_.data()[i];
            if (std::isinf(w)) continue;
            const double g = grad.data()[i];
            const double x = theta.data()[i];
            double v;
            if (w == 0.0)
                v = std::abs(g);
            else if (x == 0.0)
                v = std::max(0.0, std::abs(g) - w);
            else
                v = std::abs(g + std::copysign(w, x));
            worst = std::max(worst, v);
        }
        return worst;
    }

    /// Number of distinct parameter levels in play (gamma, pi, upsilon).
    int active_levels() const {
        auto active = [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                if (!block(pen_, b).array().isInf().all()) return true;
            return false;
        };
        int m = 0;
        if (active(0, 1)) ++m;
        if (S_ > 0 && active(1, 1 + static_cast<std::size_t>(S_))) ++m;
        if (active(1 + static_cast<std::size_t>(S_), blocks())) ++m;
        return std::max(m, 1);
    }

    Matrix stack(const TransitionDecomposition& dec) const {
        Matrix theta = Matrix::Zero(d_, cols());
        if (dec.gamma.rows() == d_ && dec.gamma.cols() == dp_) block(theta, 0) = dec.gamma;
        if (static_cast<int>(dec.pi.size()) == S_)
            for (int s = 0; s < S_; ++s) block(theta, pi_block(s)) = dec.pi[static_cast<std::size_t>(s)];
        if (dec.upsilon.size() == K_)
            for (std::size_t k = 0; k < K_; ++k) block(theta, upsilon_block(k)) = dec.upsilon[k];
        // frozen coordinates start (and stay) at zero
        theta = (pen_.array().isInf()).select(0.0, theta);
        return theta;
    }

    TransitionDecomposition unstack(const Matrix& theta, const SubgroupAssignment& assignment) const {
        TransitionDecomposition dec;
        dec.gamma = block(theta, 0);
        for (int s = 0; s < S_; ++s) dec.pi.push_back(block(theta, pi_block(s)));
        for (std::size_t k = 0; k < K_; ++k) dec.upsilon.push_back(block(theta, upsilon_block(k)));
        dec.assignment = S_ > 0 ? assignment : SubgroupAssignment{};
        return dec;
    }

private:
    static double top_eigenvalue(const Matrix& sym) {
        if (sym.size() == 0) return 0.0;
        Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
        return es.eigenvalues().maxCoeff();
    }

    void compute_lipschitz() {
        lipschitz_.assign(blocks(), 0.0);
        Matrix pooled = Matrix::Zero(dp_, dp_);
        std::vector<Matrix> group_sum(static_cast<std::size_t>(S_), Matrix::Zero(dp_, dp_));
        for (std::size_t k = 0; k < K_; ++k) {
            const SubjectStats& st = data_.subjects[k];
            if (st.n <= 0.0) continue;
            const Matrix scaled = (2.0 / st.n) * st.gram;
            pooled += scaled;
            if (group_[k] >= 0) group_sum[static_cast<std::size_t>(group_[k])] += scaled;
            lipschitz_[upsilon_block(k)] = top_eigenvalue(scaled);
        }
        lipschitz_[0] = top_eigenvalue(pooled);
        for (int s = 0; s < S_; ++s) lipschitz_[pi_block(s)] = top_eigenvalue(group_sum[static_cast<std::size_t>(s)]);
        for (auto& L : lipschitz_)
            if (!(L > 1e-12)) L = 1.0;  // no curvature: gradient is zero there too
    }

    const FitData& data_;
    int d_;
    Eigen::Index dp_;
    int S_;
    std::size_t K_;
    Matrix pen_;
    std::vector<int> group_;
    std::vector<double> lipschitz_;
    std::vector<double> step_;
    Matrix phi_;
    Matrix pg_;
};

struct SolveOutput {
    Matrix theta;
    Matrix grad;
    std::vector<double> trace;
    int iterations = 0;
    bool converged = false;
    double kkt = std::numeric_limits<double>::infinity();
};

// The loss is quadratic, so its gradient is affine in theta: the gradient at
// the extrapolated point is a combination of two known gradients, and loss
// differences follow exactly from gradients at the two ends,
//   f(b) - f(a) = <grad f(a) + grad f(b), b - a> / 2.
// Working with differences keeps the monotone test meaningful long after the
// objective itself stops changing in its leading 14 digits.
inline SolveOutput solve(Problem& prob, Matrix theta, const SolverOptions& opt) {
    opt.validate();
    SolveOutput out;
    const double floor_scale = 1.0 / prob.active_levels();
    double scale = opt.step_rule == StepRule::backtracking ? std::max(opt.initial_step, floor_scale)
                                                           : floor_scale;
    prob.set_step_scale(scale);

    Matrix grad_x;
    double Fx = prob.smooth(theta, &grad_x) + prob.penalty_value(theta);
    out.trace.push_back(Fx);
    out.kkt = prob.kkt(theta, grad_x);
    if (out.kkt <= opt.kkt_tolerance) {
        out.converged = true;
        out.theta = std::move(theta);
        out.grad = std::move(grad_x);
        return out;
    }

    Matrix x = std::move(theta);
    Matrix x_prev = x, grad_prev = grad_x;
    Matrix y = x, grad_y = grad_x;
    Matrix z, grad_z, diff;
    double t = 1.0;
    double beta = 0.0;

    auto restart = [&] {
        t = 1.0;
        beta = 0.0;
    };

    int it = 0;
    for (it = 1; it <= opt.max_iterations; ++it) {
        if (beta != 0.0) {
            y = x + beta * (x - x_prev);
            grad_y = grad_x + beta * (grad_x - grad_prev);
        } else {
            y = x;
            grad_y = grad_x;
        }
        for (;;) {
            prob.prox_step(y, grad_y, z);
            prob.smooth(z, &grad_z, false);
            if (opt.step_rule == StepRule::fixed_lipschitz || scale <= floor_scale) break;
            diff = z - y;
            // f(z) - f(y) - <grad f(y), z - y> against the step's quadratic bound
            const double curvature = 0.5 * diff.cwiseProduct(grad_z - grad_y).sum();
            if (curvature <= prob.metric_quadratic(diff) * (1.0 + 1e-12)) break;
            scale = std::max(0.5 * scale, floor_scale);
            prob.set_step_scale(scale);
        }
        double dF = 0.0;
        {
            const double* px = x.data();
            const double* pz = z.data();
            const double* gx = grad_x.data();
            const double* gz = grad_z.data();
            const double* pw = prob.penalty().data();
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                dF += 0.5 * (pz[i] - px[i]) * (gx[i] + gz[i]);
                if (pz[i] != px[i] && pw[i] != 0.0) dF += pw[i] * (std::abs(pz[i]) - std::abs(px[i]));
            }
        }
        const double F_old = Fx;
        if (dF <= 0.0) {
            x_prev.swap(x);
            grad_prev.swap(grad_x);
            x = z;
            grad_x = grad_z;
            Fx += dF;
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            beta = (t - 1.0) / t_next;
            t = t_next;
        } else {
            // objective went up: drop the momentum and restart from x
            restart();
        }
        out.trace.push_back(Fx);

        const double rel = (F_old - Fx) / std::max(std::abs(F_old), 1e-300);
        if (rel <= opt.tolerance || it % opt.kkt_check_interval == 0) {
            out.kkt = prob.kkt(x, grad_x);
            if (out.kkt <= opt.kkt_tolerance) {
                out.converged = true;
                break;
            }
        }
    }
    out.iterations = std::min(it, opt.max_iterations);
    if (!out.converged) out.kkt = prob.kkt(x, grad_x);
    out.theta = std::move(x);
    out.grad = std::move(grad_x);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public entry points

/// Solves the penalised problem. An empty assignment gives the two-level
/// (common + unique) model; otherwise subgroup effects are estimated too.
inline FitResult fit(const FitData& data, const SubgroupAssignment& assignment, const PenaltyConfig& penalties,
                     const AdaptiveWeights* weights, const SolverOptions& options,
                     const TransitionDecomposition* warm_start = nullptr) {
    penalties.validate();
    options.validate();
    if (data.subjects.empty()) throw DimensionError("no subjects to fit");
    const int dp = data.d * data.p;
    Matrix pen = detail::penalty_layout(data.d, dp, assignment.S, data.size(), penalties, weights, options);
    detail::Problem prob(data, assignment, std::move(pen));
    Matrix theta = warm_start != nullptr ? prob.stack(*warm_start) : Matrix::Zero(data.d, prob.cols());
    auto out = detail::solve(prob, std::move(theta), options);
    FitResult res;
    res.decomposition = prob.unstack(out.theta, assignment);
    res.objective_trace = std::move(out.trace);
    res.iterations = out.iterations;
    res.converged = out.converged;
    res.kkt_residual = out.kkt;
    return res;
}

inline FitResult fit(const MultiSubjectPanel& panel, const SubgroupAssignment& assignment,
                     const PenaltyConfig& penalties, const AdaptiveWeights* weights,
                     const SolverOptions& options) {
    return fit(make_fit_data(panel), assignment, penalties, weights, options);
}

/// Objective evaluated straight from the regression forms (no sufficient
/// statistics involved).
inline double objective_value(const std::vector<RegressionForm>& forms, const TransitionDecomposition& decomp,
                              const PenaltyConfig& penalties, const AdaptiveWeights* weights) {
    if (forms.size() != decomp.subjects()) throw DimensionError("decomposition/subject count mismatch");
    const Eigen::Index d = decomp.gamma.rows();
    const Eigen::Index dp = decomp.gamma.cols();
    double loss = 0.0;
    for (std::size_t k = 0; k < forms.size(); ++k) {
        const auto& f = forms[k];
        if (f.Y.rows() != d || f.Z.rows() != dp) throw DimensionError("regression form shape mismatch");
        if (f.samples() == 0) continue;
        const Matrix resid = f.Y - compose_transition(decomp, k) * f.Z;
        loss += resid.squaredNorm() / static_cast<double>(f.samples());
    }
    SolverOptions all_blocks;
    const Matrix pen = detail::penalty_layout(static_cast<int>(d), static_cast<int>(dp), decomp.subgroups(),
                                              decomp.subjects(), penalties, weights, all_blocks);
    double total = 0.0;
    auto add = [&](const Matrix& m, std::size_t b) {
        const auto p = pen.middleCols(static_cast<Eigen::Index>(b) * dp, dp);
        total += (p.array() * m.array().abs()).sum();
    };
    add(decomp.gamma, 0);
    for (std::size_t s = 0; s < decomp.pi.size(); ++s) add(decomp.pi[s], 1 + s);
    for (std::size_t k = 0; k < decomp.upsilon.size(); ++k) add(decomp.upsilon[k], 1 + decomp.pi.size() + k);
    return loss + total;
}

/// Largest KKT violation of `decomp`, recomputed from the regression forms.
inline double kkt_residual(const std::vector<RegressionForm>& forms, const TransitionDecomposition& decomp,
                           const PenaltyConfig& penalties, const AdaptiveWeights* weights,
                           const SolverOptions& options = {}) {
    if (forms.size() != decomp.subjects()) throw DimensionError("decomposition/subject count mismatch");
    const Eigen::Index d = decomp.gamma.rows();
    const Eigen::Index dp = decomp.gamma.cols();
    const int S = decomp.subgroups();
    const std::size_t K = decomp.subjects();
    const Matrix pen = detail::penalty_layout(static_cast<int>(d), static_cast<int>(dp), S, K, penalties,
                                              weights, options);
    Matrix grad = Matrix::Zero(d, pen.cols());
    for (std::size_t k = 0; k < K; ++k) {
        const auto& f = forms[k];
        if (f.samples() == 0) continue;
        const Matrix g = (2.0 / static_cast<double>(f.samples())) *
                         (compose_transition(decomp, k) * f.Z - f.Y) * f.Z.transpose();
        grad.middleCols(0, dp) += g;
        if (S > 0) grad.middleCols((1 + decomp.assignment.group_of(k)) * dp, dp) += g;
        grad.middleCols(static_cast<Eigen::Index>(1 + S + k) * dp, dp) += g;
    }
    Matrix theta(d, pen.cols());
    theta.middleCols(0, dp) = decomp.gamma;
    for (int s = 0; s < S; ++s) theta.middleCols((1 + s) * dp, dp) = decomp.pi[static_cast<std::size_t>(s)];
    for (std::size_t k = 0; k < K; ++k) theta.middleCols(static_cast<Eigen::Index>(1 + S + k) * dp, dp) = decomp.upsilon[k];
    double worst = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double w = pen.data()[i];
        if (std::isinf(w)) continue;
        const double g = grad.data()[i];
        const double x = theta.data()[i];
        const double v = w == 0.0 ? std::abs(g)
                         : x == 0.0 ? std::max(0.0, std::abs(g) - w)
                                    : std::abs(g + std::copysign(w, x));
        worst = std::max(worst, v);
    }
    return worst;
}

/// Smallest penalty on `which` that keeps that block at zero at the null
/// point: every penalised coordinate zero, unpenalised (exempt) coordinates at
/// their least-squares values.
inline double lambda_max(const FitData& data, const SubgroupAssignment& assignment, Block which,
                         const PenaltyConfig& penalties, const AdaptiveWeights* weights,
                         const SolverOptions& options = {}) {
    if (which == Block::pi && assignment.S == 0) return 0.0;
    const int d = data.d;
    const int dp = data.d * data.p;
    const int S = assignment.S;
    const std::size_t K = data.size();

    // Null point: only exempt coordinates of fitted blocks free.
    PenaltyConfig null_pen = penalties;
    null_pen.mode = PenaltyMode::standard;
    null_pen.lambda1 = null_pen.alpha_s = null_pen.lambda2 = 1.0;
    Matrix pen = detail::penalty_layout(d, dp, S, K, null_pen, nullptr, options);
    pen = (pen.array() == 0.0).select(0.0, Matrix::Constant(pen.rows(), pen.cols(), detail::kFrozen));
    detail::Problem prob(data, assignment, pen);
    Matrix theta = Matrix::Zero(d, prob.cols());
    Matrix grad;
    if ((pen.array() == 0.0).any()) {
        SolverOptions tight = options;
        tight.kkt_tolerance = std::min(options.kkt_tolerance, 1e-8);
        theta = detail::solve(prob, std::move(theta), tight).theta;
    }
    prob.smooth(theta, &grad);

    const bool adaptive = penalties.mode == PenaltyMode::adaptive;
    if (adaptive && weights == nullptr) throw ConfigError("adaptive penalties need adaptive weights");
    double best = 0.0;
    auto scan = [&](std::size_t b, const Matrix* w, bool exemptable) {
        const auto g = prob.block(grad, b);
        for (Eigen::Index j = 0; j < dp; ++j)
            for (Eigen::Index i = 0; i < d; ++i) {
                if (exemptable && penalties.exempt(i, j)) continue;
                const double weight = w != nullptr ? (*w)(i, j) : 1.0;
                best = std::max(best, std::abs(g(i, j)) / weight);
            }
    };
    switch (which) {
        case Block::gamma:
            scan(0, adaptive ? &weights->w_gamma : nullptr, true);
            break;
        case Block::pi:
            for (int s = 0; s < S; ++s)
                scan(prob.pi_block(s), adaptive ? &weights->w_pi[static_cast<std::size_t>(s)] : nullptr,
                     penalties.exempt_all_blocks);
            break;
        case Block::upsilon:
            for (std::size_t k = 0; k < K; ++k)
                scan(prob.upsilon_block(k), adaptive ? &weights->w_upsilon[k] : nullptr,
                     penalties.exempt_all_blocks);
            break;
    }
    return best;
}

}  // namespace dynvar
