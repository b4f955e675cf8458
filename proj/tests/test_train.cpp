#include "support/small.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace bwm;

TEST(Schedule, LinearWarmup) {
  EXPECT_DOUBLE_EQ(warmup_factor(25, 50), 0.5);
  EXPECT_DOUBLE_EQ(warmup_factor(50, 50), 1.0);
  EXPECT_DOUBLE_EQ(warmup_factor(500, 50), 1.0);
  EXPECT_DOUBLE_EQ(warmup_factor(3, 0), 1.0);
}

TEST(Schedule, FlatByDefaultCosineWhenAsked) {
  TrainConfig c;
  c.warmup_steps = 10;
  c.steps = 110;
  EXPECT_DOUBLE_EQ(schedule_factor(60, c), 1.0);
  c.cosine = true;
  EXPECT_DOUBLE_EQ(schedule_factor(5, c), 0.5);
  EXPECT_DOUBLE_EQ(schedule_factor(10, c), 1.0);
  EXPECT_NEAR(schedule_factor(60, c), 0.5, 1e-12);
  EXPECT_NEAR(schedule_factor(110, c), 0.0, 1e-12);
}

TEST(Schedule, OptimizerReportsWarmupFactor) {
  auto s = small::make_small();
  s.run.train.warmup_steps = 50;
  s.run.train.steps = 25;
  auto st = init_state(s.run, s.codec, s.data);
  StepLog last;
  train(st, s.data, [&](const StepLog& l) { last = l; });
  EXPECT_DOUBLE_EQ(st.optimizer.lr_factor(), 0.5);
  EXPECT_DOUBLE_EQ(last.lr, 0.5 * s.run.train.lr);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig r = small::small_run_config();
  r.train.group_lr["aligner"] = 3e-4;
  r.train.cosine = true;
  r.train.orientations = 8;
  r.model.flow_scale = 0.25;
  std::istringstream in(format_run_config(r));
  const RunConfig back = parse_run_config(in);
  EXPECT_EQ(format_run_config(back), format_run_config(r));
  EXPECT_DOUBLE_EQ(back.train.group_rate("aligner"), 3e-4);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  std::istringstream unknown("model.depth = 3\n");
  EXPECT_THROW(parse_run_config(unknown), std::invalid_argument);
  std::istringstream orient("train.orientations = 5\n");
  EXPECT_THROW(parse_run_config(orient), std::invalid_argument);
}

TEST(FlowScale, IsRmsOfLatentDisplacement) {
  const auto s = small::make_small();
  double sq = 0;
  long n = 0;
  for (const auto& ex : s.data.examples) {
    const auto& subj = s.data.subject_of(ex);
    const auto& a = subj.timepoints[static_cast<std::size_t>(ex.pair.source)].latent.tokens;
    const auto& b = subj.timepoints[static_cast<std::size_t>(ex.pair.target)].latent.tokens;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(b.data()[i]) - a.data()[i];
      sq += d * d;
      ++n;
    }
  }
  EXPECT_NEAR(estimate_flow_scale(s.data), std::sqrt(sq / static_cast<double>(n)), 1e-9);
  EXPECT_GT(init_state(s.run, s.codec, s.data).model.config().flow_scale, 0);
}

TEST(FlowScale, UnresolvedScaleIsAnError) {
  ModelConfig c;
  EXPECT_THROW(c.resolved_flow_scale(), std::logic_error);
}

TEST(Training, DeterministicPerSeed) {
  auto s = small::make_small();
  auto a = init_state(s.run, s.codec, s.data), b = init_state(s.run, s.codec, s.data);
  std::vector<double> la, lb;
  train(a, s.data, [&](const StepLog& l) { la.push_back(l.loss); });
  train(b, s.data, [&](const StepLog& l) { lb.push_back(l.loss); });
  EXPECT_EQ(la, lb);
}

TEST(Training, EveryModeRunsAndRespectsTaskChoice) {
  auto s = small::make_small();
  for (auto mode : {TrainMode::plan_only, TrainMode::img_only}) {
    s.run.train.mode = mode;
    auto st = init_state(s.run, s.codec, s.data);
    train(st, s.data, [&](const StepLog& l) {
      EXPECT_EQ(l.task, mode == TrainMode::plan_only ? Task::plan : Task::img);
      EXPECT_TRUE(std::isfinite(l.loss));
    });
  }
}

TEST(Checkpoint, RoundTripAndResumeMatchesStraightRun) {
  auto s = small::make_small();
  s.run.train.orientations = 8;
  const auto path = std::filesystem::temp_directory_path() / "bwm_test_resume.ckpt";

  auto straight = init_state(s.run, s.codec, s.data);
  std::vector<std::string> trace_a;
  train(straight, s.data, [&](const StepLog& l) { trace_a.push_back(format_log(l)); });

  auto first = init_state(s.run, s.codec, s.data);
  first.config.steps = 3;
  std::vector<std::string> trace_b;
  train(first, s.data, [&](const StepLog& l) { trace_b.push_back(format_log(l)); });
  save_checkpoint(path, first);
  auto resumed = load_checkpoint<float>(path);
  EXPECT_EQ(resumed.step, 3);
  resumed.config.steps = s.run.train.steps;
  train(resumed, s.data, [&](const StepLog& l) { trace_b.push_back(format_log(l)); });
  EXPECT_EQ(trace_a, trace_b);

  const auto& pa = straight.model.params();
  const auto& pb = resumed.model.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (int i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa.value(i) == pb.value(i)) << pa.info(i).name;
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptionAndMismatchedGrid) {
  auto s = small::make_small();
  const auto st = init_state(s.run, s.codec, s.data);
  const auto path = std::filesystem::temp_directory_path() / "bwm_test_bad.ckpt";
  save_checkpoint(path, st);
  ModelConfig other = st.model.config();
  other.volume = Shape3{32, 32, 32};
  EXPECT_THROW(load_checkpoint<float>(path, &other), std::invalid_argument);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
  std::filesystem::remove(path);
}
