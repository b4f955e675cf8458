#include "support/properties.hpp"

#include <gtest/gtest.h>

using namespace bwm;

TEST(Partition, CriterionHolds) {
  const auto c = props::parameter_partition();
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Partition, LayerGroupsFollowTheSplit) {
  ModelConfig cfg = props::micro_config();
  cfg.layers = 6;
  cfg.taps = {1, 3};
  const WorldModel<double> m(cfg, 1);
  const auto& P = m.params();
  for (int l = 1; l <= cfg.layers; ++l) {
    const std::string n = "layer" + std::to_string(l);
    const bool shared = l <= cfg.shared_layers();
    EXPECT_EQ(P.find(n + ".ffn.shared.w1") >= 0, shared) << n;
    EXPECT_EQ(P.find(n + ".ffn.plan.w1") >= 0, !shared) << n;
    EXPECT_EQ(P.find(n + ".ffn.img.w1") >= 0, !shared) << n;
    EXPECT_GE(P.find(n + ".attn.wq"), 0) << n;  // attention is shared everywhere
  }
  // Task routing picks the same ids below the split and different ones above.
  EXPECT_EQ(m.layer(1).ffn[0].w1, m.layer(1).ffn[1].w1);
  EXPECT_NE(m.layer(cfg.layers).ffn[0].w1, m.layer(cfg.layers).ffn[1].w1);
}

TEST(Partition, DenseVariantSharesEveryFfn) {
  ModelConfig cfg = props::micro_config();
  cfg.y_shaped = false;
  const WorldModel<double> m(cfg, 1);
  EXPECT_EQ(m.params().count("ffn.plan"), 0);
  EXPECT_EQ(m.params().count("ffn.img"), 0);
  EXPECT_GT(m.params().count("ffn.shared"), 0);
}

TEST(Partition, CrossTaskGradientsAreExactlyZero) {
  const auto p = props::micro_problem();
  const auto gp = props::micro_gradients(p, props::LossKind::plan);
  const auto gi = props::micro_gradients(p, props::LossKind::img);
  const auto& P = p.model.params();
  for (int i = 0; i < P.size(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (P.info(i).group == "ffn.plan") EXPECT_TRUE((gi[u].array() == 0).all()) << P.info(i).name;
    if (P.info(i).group == "ffn.img") EXPECT_TRUE((gp[u].array() == 0).all()) << P.info(i).name;
  }
}

TEST(Partition, FrozenVocabularyGetsNoUpdate) {
  auto p = props::micro_problem();
  const int vocab = p.model.ids().vocab;
  EXPECT_FALSE(p.model.params().info(vocab).trainable);
  const auto g = props::micro_gradients(p, props::LossKind::plan);
  EXPECT_TRUE((g[static_cast<std::size_t>(vocab)].array() == 0).all());
}
