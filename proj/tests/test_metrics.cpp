#include <gtest/gtest.h>

#include <random>

#include "dynvar/metrics.hpp"
#include "oracles.hpp"

using namespace dynvar;

namespace {

Matrix sparse_truth() {
    Matrix t = Matrix::Zero(10, 10);
    for (int i = 0; i < 10; ++i) t(i, i) = 0.4;
    for (int i = 0; i < 10; ++i) t(i, (i + 3) % 10) = 0.2;  // 20 of 100 cells
    return t;
}

}  // namespace

TEST(SupportRecovery, ExactEstimate) {
    const auto r = sensitivity_specificity({sparse_truth()}, {sparse_truth()});
    EXPECT_EQ(r.sensitivity, 1.0);
    EXPECT_EQ(r.specificity, 1.0);
}

TEST(SupportRecovery, AllZeroEstimate) {
    const auto r = sensitivity_specificity({Matrix::Zero(10, 10)}, {sparse_truth()});
    EXPECT_EQ(r.sensitivity, 0.0);
    EXPECT_EQ(r.specificity, 1.0);
}

TEST(SupportRecovery, FourCellEnumeration) {
    const Matrix truth = (Matrix(2, 2) << 1, 1, 0, 0).finished();
    const Matrix est = (Matrix(2, 2) << 1, 0, 1, 0).finished();
    const auto c = confusion(est, truth);
    EXPECT_EQ(c.tp, 1);
    EXPECT_EQ(c.fn, 1);
    EXPECT_EQ(c.fp, 1);
    EXPECT_EQ(c.tn, 1);
    const auto r = sensitivity_specificity({est}, {truth});
    EXPECT_EQ(r.sensitivity, 0.5);
    EXPECT_EQ(r.specificity, 0.5);
}

TEST(SupportRecovery, AllNonzeroTruthSkipsSpecificity) {
    const Matrix full = Matrix::Constant(2, 2, 0.1);
    const auto r = sensitivity_specificity({full, sparse_truth().topLeftCorner(2, 2)},
                                           {full, Matrix(sparse_truth().topLeftCorner(2, 2))});
    EXPECT_EQ(r.warnings.size(), 1u);
    EXPECT_EQ(r.specificity, 1.0);
    EXPECT_TRUE(std::isnan(r.per_subject[0].specificity));
}

TEST(Mcc, Examples) {
    const Matrix t = sparse_truth();
    EXPECT_EQ(mcc({t}, {t}), 1.0);
    const Matrix complement = (t.array() == 0.0).cast<double>().matrix();
    EXPECT_EQ(mcc({complement}, {t}), -1.0);
    EXPECT_EQ(mcc(ConfusionCounts{1, 1, 1, 1}), 0.0);
    EXPECT_EQ(mcc(ConfusionCounts{0, 5, 0, 3}), 0.0);  // degenerate denominator
}

TEST(Mcc, MatchesFormula) {
    const ConfusionCounts c{7, 80, 3, 10};
    const double expected = (7.0 * 80.0 - 3.0 * 10.0) / std::sqrt(10.0 * 17.0 * 83.0 * 90.0);
    EXPECT_NEAR(mcc(c), expected, 1e-12);
}

TEST(BiasRmse, Examples) {
    const Matrix t = sparse_truth();
    const auto zero = bias_rmse({t}, {t});
    EXPECT_EQ(zero.absolute_bias, 0.0);
    EXPECT_EQ(zero.rmse, 0.0);
    Matrix off = t;
    off(4, 7) += 0.1;
    const auto one = bias_rmse({off}, {t});
    EXPECT_NEAR(one.absolute_bias, 0.001, 1e-12);
    EXPECT_NEAR(one.rmse, 0.01, 1e-12);
    const auto shifted = bias_rmse({Matrix(t.array() - 0.25)}, {t});
    EXPECT_NEAR(shifted.absolute_bias, 0.25, 1e-12);
    EXPECT_NEAR(shifted.rmse, 0.25, 1e-12);
}

TEST(Ari, IdenticalAndRelabelled) {
    const SubgroupAssignment a{{1, 1, 2, 2, 3}, 3};
    const SubgroupAssignment b{{3, 3, 1, 1, 2}, 3};
    EXPECT_EQ(ari(a, a), 1.0);
    EXPECT_EQ(ari(b, a), 1.0);
}

TEST(Ari, FourSubjectPairEnumeration) {
    const SubgroupAssignment truth{{1, 1, 2, 2}, 2};
    const SubgroupAssignment est{{1, 2, 1, 2}, 2};
    const auto pc = pair_counts(est, truth);
    EXPECT_EQ(pc.a, 0);
    EXPECT_EQ(pc.b, 2);
    EXPECT_EQ(pc.c, 2);
    EXPECT_EQ(pc.d_pairs, 2);
    // Pair-form ARI 2(ad - bc) / ((a+b)(b+d) + (a+c)(c+d)) with the enumerated counts.
    const double a = 0, b = 2, c = 2, d = 2;
    const double oracle_value = 2.0 * (a * d - b * c) / ((a + b) * (b + d) + (a + c) * (c + d));
    EXPECT_NEAR(ari(est, truth), oracle_value, 1e-12);
    EXPECT_NEAR(ari(est, truth), -0.5, 1e-12);
}

TEST(Ari, AgreesWithContingencyFormula) {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> lab(1, 4);
    for (int rep = 0; rep < 50; ++rep) {
        SubgroupAssignment x{{}, 4}, y{{}, 4};
        for (int k = 0; k < 15; ++k) {
            x.labels.push_back(lab(rng));
            y.labels.push_back(lab(rng));
        }
        EXPECT_NEAR(ari(x, y), oracle::ari_contingency(x.labels, y.labels), 1e-12);
    }
}

TEST(Ari, RandomAssignmentNearZero) {
    std::mt19937_64 rng(77);
    SubgroupAssignment truth{{}, 2};
    for (int k = 0; k < 50; ++k) truth.labels.push_back(k < 25 ? 1 : 2);
    double sum = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        SubgroupAssignment random{truth.labels, 2};
        std::shuffle(random.labels.begin(), random.labels.end(), rng);
        sum += ari(random, truth);
    }
    EXPECT_NEAR(sum / 200.0, 0.0, 0.1);
}

TEST(Ari, TrivialPartitionsScoreOne) {
    const SubgroupAssignment one{{1, 1, 1}, 1};
    EXPECT_EQ(ari(one, one), 1.0);
}

TEST(MonteCarloError, Examples) {
    EXPECT_EQ(monte_carlo_error({0.5, 0.5, 0.5}), 0.0);
    EXPECT_NEAR(monte_carlo_error({0.0, 1.0}), 0.7071, 1e-4);
    EXPECT_NEAR(monte_carlo_error({0.0, 1.0}), std::sqrt(0.5), 1e-12);
    EXPECT_THROW(monte_carlo_error({1.0}), DimensionError);
}

TEST(RecoveryBand, Cutoffs) {
    EXPECT_EQ(recovery_band(0.94), RecoveryBand::excellent);
    EXPECT_EQ(recovery_band(0.90), RecoveryBand::excellent);
    EXPECT_EQ(recovery_band(0.80), RecoveryBand::good);
    EXPECT_EQ(recovery_band(0.65), RecoveryBand::moderate);
    EXPECT_EQ(recovery_band(0.64), RecoveryBand::poor);
    EXPECT_STREQ(to_string(RecoveryBand::good), "good");
}

TEST(Evaluate, PerfectEstimate) {
    const std::vector<Matrix> t{sparse_truth(), sparse_truth()};
    const SubgroupAssignment a{{1, 2}, 2};
    const auto r = evaluate(t, t, &a, &a);
    EXPECT_EQ(r.sensitivity, 1.0);
    EXPECT_EQ(r.specificity, 1.0);
    EXPECT_EQ(r.mcc, 1.0);
    EXPECT_EQ(r.ari, 1.0);
    EXPECT_EQ(r.absolute_bias, 0.0);
    EXPECT_EQ(r.rmse, 0.0);
}

TEST(Evaluate, NoLabelsNoAri) {
    const std::vector<Matrix> t{sparse_truth()};
    EXPECT_TRUE(std::isnan(evaluate(t, t).ari));
    EXPECT_THROW(evaluate(t, {sparse_truth(), sparse_truth()}), DimensionError);
}
