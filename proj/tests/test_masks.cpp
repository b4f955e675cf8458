#include "support/oracles.hpp"
#include "support/properties.hpp"

#include "bwm/model.hpp"
#include "bwm/train.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bwm;

TEST(AttentionMask, EnumeratedSubsetsMatchOracle) {
  const auto c = props::mask_enumeration(12, 4);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(AttentionMask, FullSubsetsOnShortSequences) {
  for (int L = 1; L <= 8; ++L)
    for (unsigned bits = 0; bits < (1u << L); ++bits) {
      std::vector<int> text;
      for (int i = 0; i < L; ++i)
        if (bits >> i & 1u) text.push_back(i);
      const auto m = build_attention_mask(text, L);
      const auto o = oracle::attention_mask(text, L);
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) ASSERT_EQ(m(i, j), o(i, j)) << "L=" << L << " bits=" << bits;
    }
}

TEST(AttentionMask, RejectsOutOfRangeIndex) {
  EXPECT_THROW(build_attention_mask({0, 5}, 5), std::out_of_range);
  EXPECT_THROW(build_planning_mask({-1}, 5), std::out_of_range);
}

TEST(AttentionMask, PerturbingLaterTextNeverReachesEarlierPositions) {
  const auto c = props::causality();
  EXPECT_TRUE(c.pass) << c.detail;
}

// Imaging rows see the whole context, including text that follows them.
TEST(AttentionMask, ImageRowsHaveFullContext) {
  const auto cfg = props::micro_config();
  std::mt19937_64 rng(1);
  const LatentGrid<double> z{cfg.latent_grid(), standard_normal<double>(cfg.latent_grid().voxels(), cfg.latent_channels, rng)};
  const auto ctx = img_context_ids(Demographics{}, {TreatmentPlan{TreatmentToken::SUR}}, TreatmentPlan{TreatmentToken::RT}, 30);
  const auto seq = build_sequence(z, ctx, Task::img, &z, true);
  WorldModel<double> model(cfg, 1);
  const auto mask = model.mask_for(seq);
  for (int i : seq.image_index)
    for (int j = 0; j < seq.length(); ++j) EXPECT_EQ((*mask)(i, j), 0.0) << i << "," << j;
  // ...while text stays causal among itself.
  const auto causal = seq.causal_index();
  for (std::size_t a = 0; a < causal.size(); ++a)
    for (std::size_t b = a + 1; b < causal.size(); ++b) EXPECT_TRUE(std::isinf((*mask)(causal[a], causal[b])));
}

TEST(AttentionMask, PlanningMaskMatchesCausalMaskOnText) {
  const std::vector<int> text = {3, 4, 7, 9};
  const auto a = build_attention_mask(text, 11);
  const auto p = build_planning_mask(text, 11);
  for (int i : text)
    for (int j : text) EXPECT_EQ(a(i, j), p(i, j));
}
