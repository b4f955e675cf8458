#include "support/oracles.hpp"
#include "support/properties.hpp"

#include "bwm/align.hpp"
#include "bwm/eval.hpp"
#include "bwm/infer.hpp"

#include <gtest/gtest.h>

using namespace bwm;

TEST(LossIdentities, AllHold) {
  const auto c = props::loss_identities();
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(LossIdentities, FocalWithoutFocusingIsCrossEntropy) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix<double> logits = standard_normal<double>(64, 4, rng);
    const Matrix<double> probs = softmax_rows(logits);
    Matrix<double> onehot = Matrix<double>::Zero(64, 4);
    std::vector<int> cls(64);
    for (int v = 0; v < 64; ++v) onehot(v, cls[static_cast<std::size_t>(v)] = static_cast<int>(rng() % 4)) = 1;
    oracle::Dense d(64, 4);
    for (int v = 0; v < 64; ++v)
      for (int c = 0; c < 4; ++c) d(v, c) = logits(v, c);
    const double ce = oracle::cross_entropy(d, cls);
    EXPECT_NEAR(focal_loss<double>(probs, onehot, 0.0, 1e-12), ce, 1e-10 * ce);
  }
}

TEST(LossIdentities, FocalDownweightsConfidentVoxels) {
  Matrix<double> probs(2, 4), onehot = Matrix<double>::Zero(2, 4);
  probs << 0.9, 0.05, 0.03, 0.02, 0.3, 0.3, 0.2, 0.2;
  onehot(0, 0) = onehot(1, 0) = 1;
  EXPECT_LT(focal_loss<double>(probs, onehot, 2.0), focal_loss<double>(probs, onehot, 0.0));
}

TEST(LossIdentities, DiceValues) {
  Matrix<double> m = Matrix<double>::Zero(8, 4);
  for (int v = 0; v < 8; ++v) m(v, v % 4) = 1;
  EXPECT_NEAR(dice_loss<double>(m, m), 0.0, props::kDicePerfectTol);
  EXPECT_NEAR(dice_loss<double>(0.5 * m, m), 1.0 / 3.0, props::kDiceThirdTol);
  Matrix<double> other = Matrix<double>::Zero(8, 4);
  for (int v = 0; v < 8; ++v) other(v, 0) = 1;  // all background: disjoint from every foreground class
  EXPECT_DOUBLE_EQ(dice_loss<double>(other, m), 1.0);
}

TEST(LossIdentities, AlignmentWeight) {
  EXPECT_EQ(alignment_weight(Task::plan, std::nullopt), 1.0);
  EXPECT_EQ(alignment_weight(Task::img, 0.0), 0.0);
  EXPECT_EQ(alignment_weight(Task::img, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(alignment_weight(Task::img, 0.25), 0.25);
}

TEST(Euler, ConstantFieldAndRampConvergence) {
  const auto c = props::euler();
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Euler, RejectsZeroSteps) {
  EXPECT_THROW(euler_integrate<double>(Matrix<double>::Zero(1, 1), [](const Matrix<double>& z, double) { return z; }, 0),
               std::invalid_argument);
}

TEST(Metrics, FastMatchesBruteForce) {
  const auto c = props::metric_oracles(50, 5);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Metrics, IdenticalVolumesHitThePsnrCap) {
  Volume v(Shape3{8, 8, 8});
  v.data.setRandom();
  EXPECT_EQ(psnr(v, v), kPsnrCap);
  EXPECT_EQ(nmse(v, v), 0.0);
  EXPECT_NEAR(ssim(v, v), 1.0, 1e-12);
}

TEST(Metrics, ShapeMismatchAndZeroReference) {
  Volume a(Shape3{8, 8, 8}), b(Shape3{8, 8, 9});
  EXPECT_THROW(nmse(a, b), std::invalid_argument);
  EXPECT_THROW(nmse(a, a), std::invalid_argument);  // zero-norm reference
  Volume s(Shape3{4, 8, 8});
  EXPECT_THROW(ssim(s, s), std::invalid_argument);  // smaller than the window
}

TEST(Metrics, PearsonAndPlanMetrics) {
  EXPECT_NEAR(*pearson({1, 2, 3, 4}, {2, 4, 6, 8}), 1.0, 1e-12);
  EXPECT_NEAR(*pearson({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_FALSE(pearson({1, 1, 1}, {1, 2, 3}).has_value());

  const TreatmentPlan a{TreatmentToken::SUR}, b{TreatmentToken::RT, TreatmentToken::TMZ}, c{TreatmentToken::AM};
  const auto m = plan_metrics({a, b, a, c}, {a, b, b, a});
  EXPECT_DOUBLE_EQ(m.accuracy, 50.0);
  EXPECT_EQ(m.items, 4);
  ASSERT_EQ(m.unexpected.size(), 1u);
  EXPECT_EQ(m.unexpected[0], "AM");
}

TEST(Metrics, FocusCorrelationStrata) {
  std::vector<FocusItem> items;
  for (int k = 0; k < 6; ++k) items.push_back({static_cast<double>(k), 2.0 * k + 1, 30 + 60 * k, TreatmentPlan{TreatmentToken::AM}});
  const auto r = focus_correlation(items);
  ASSERT_TRUE(r.overall.has_value());
  EXPECT_NEAR(*r.overall, 1.0, 1e-12);
  EXPECT_EQ(r.counts.at("overall"), 6);
}
